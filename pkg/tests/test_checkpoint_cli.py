import csv
import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from wmoe.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from wmoe.cli import main
from wmoe.config import desk_config
from wmoe.data import read_dataset, read_pgm
from wmoe.encoders import load_features
from wmoe.errors import ConfigError, CorruptionError, FormatError
from wmoe.model import AnomalyModel

SMALL = dict(C=16, grid=(4, 4), image_size=(16, 16), taps=2)
FAMILIES = {"families": [
    {"preset": "grating", "image_size": [16, 16], "defect_scale": [2.0, 4.0]},
    {"preset": "checkerboard", "image_size": [16, 16], "defect_scale": [2.0, 4.0]},
]}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "fam.json").write_text(json.dumps(FAMILIES))
    cfg = desk_config(epochs=2, batch=4, train_families=["checkerboard"], eval_families=["grating"],
                      **SMALL)
    (root / "cfg.json").write_text(cfg.to_json())
    assert main(["gen-data", "--spec", str(root / "fam.json"), "--n", "6", "--seed", "1",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = AnomalyModel(desk_config(**SMALL))
    save_checkpoint(model, tmp_path / "m.wmoe")
    back = load_checkpoint(tmp_path / "m.wmoe")
    assert back.cfg == model.cfg
    for k in model.params:
        assert_array_equal(back.params[k].data, model.params[k].data)
    raw = (tmp_path / "m.wmoe").read_bytes()
    assert encode_checkpoint(back.cfg, back.params.snapshot()) == raw


def test_checkpoint_rejects_damage():
    raw = encode_checkpoint(desk_config(**SMALL), AnomalyModel(desk_config(**SMALL)).params.snapshot())
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0x01
    with pytest.raises(CorruptionError):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(FormatError):
        decode_checkpoint(raw[:6])
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOTACKPT" + raw[8:])


def test_checkpoint_config_mismatch_names_field(tmp_path):
    save_checkpoint(AnomalyModel(desk_config(**SMALL)), tmp_path / "m.wmoe")
    with pytest.raises(ConfigError) as ei:
        load_checkpoint(tmp_path / "m.wmoe", expect=desk_config(**{**SMALL, "C": 32}))
    assert ei.value.field == "C"


def test_gen_data_is_deterministic_and_guarded(workspace, tmp_path):
    args = ["gen-data", "--spec", str(workspace / "fam.json"), "--n", "6", "--seed", "1", "--out"]
    assert main(args + [str(tmp_path / "again")]) == 0
    a = read_dataset(workspace / "data")
    b = read_dataset(tmp_path / "again")
    assert [s.id for s in a] == [s.id for s in b]
    for x, y in zip(a, b):
        assert_array_equal(x.pixels, y.pixels)
    assert main(args + [str(tmp_path / "again")]) == 2
    assert main(args + [str(tmp_path / "again"), "--force"]) == 0


def test_train_outputs(workspace):
    rows = list(csv.DictReader(open(workspace / "run" / "loss.csv")))
    # 6 checkerboard images, batch 4 -> 2 steps per epoch, 2 epochs
    assert len(rows) == 4
    assert list(rows[0]) == ["epoch", "step", "global", "focal", "dice", "kl", "rec", "total"]
    model = load_checkpoint(workspace / "run" / "checkpoint.wmoe")
    assert model.cfg.train_families == ["checkerboard"]


def test_eval_writes_metrics_and_maps(workspace):
    out = workspace / "ev"
    assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.wmoe"),
                 "--data", str(workspace / "data"), "--out", str(out), "--dump-maps"]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["family"] for r in rows] == ["grating"]
    assert 0.0 <= float(rows[0]["image_auroc"]) <= 1.0
    heat, maxval = read_pgm(out / "maps" / "grating_00000_map.pgm")
    side, _ = read_pgm(out / "maps" / "grating_00000_side.pgm")
    assert maxval == 255 and heat.shape == (16, 16) and side.shape == (16, 32)
    assert_array_equal(side[:, 16:], heat)


def test_eval_dump_quantisation(workspace, tmp_path):
    model = load_checkpoint(workspace / "run" / "checkpoint.wmoe")
    samples = [s for s in read_dataset(workspace / "data") if s.family == "grating"]
    _, maps = model.predict(*model.encode(np.stack([s.pixels for s in samples])))
    main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.wmoe"),
          "--data", str(workspace / "data"), "--out", str(tmp_path), "--dump-maps"])
    for s, m in zip(samples, maps):
        heat, _ = read_pgm(tmp_path / "maps" / f"{s.id}_map.pgm")
        assert_array_equal(heat, np.round(255 * m))


def test_eval_with_incompatible_config_exits_2(workspace, tmp_path, capsys):
    (tmp_path / "c.json").write_text(desk_config(**{**SMALL, "C": 32}).to_json())
    code = main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.wmoe"), "--data",
                 str(workspace / "data"), "--out", str(tmp_path / "o"), "--config", str(tmp_path / "c.json")])
    assert code == 2
    assert "C=" in capsys.readouterr().err


def test_corrupted_checkpoint_exits_2(workspace, tmp_path):
    raw = bytearray((workspace / "run" / "checkpoint.wmoe").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "bad.wmoe").write_bytes(bytes(raw))
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.wmoe"), "--data",
                 str(workspace / "data"), "--out", str(tmp_path / "o")]) == 2


def test_numeric_failure_exits_3(workspace, tmp_path):
    cfg = desk_config(epochs=1, batch=4, tau=1e-310, **SMALL)
    (tmp_path / "c.json").write_text(cfg.to_json())
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(tmp_path / "c.json"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "o")])
    assert code == 3


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["train"])
    assert ei.value.code == 2
    (tmp_path / "c.json").write_text('{"C": 16, "nonsense": 1}')
    assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 2


def test_ablate_and_export(workspace):
    cfg = desk_config(epochs=1, batch=6, train_families=["checkerboard"], eval_families=["grating"],
                      **SMALL)
    (workspace / "abl.json").write_text(cfg.to_json())
    assert main(["ablate", "--config", str(workspace / "abl.json"), "--data", str(workspace / "data"),
                 "--out", str(workspace / "abl"), "--seeds", "0"]) == 0
    rows = list(csv.DictReader(open(workspace / "abl" / "ablation.csv")))
    assert [r["row"] for r in rows] == ["baseline", "+CTDS", "+CTDS+WCMA", "+CTDS+SA-MoE", "full"]

    assert main(["export-features", "--data", str(workspace / "data"), "--out",
                 str(workspace / "feats"), "--config", str(workspace / "cfg.json")]) == 0
    b = load_features(workspace / "feats" / "grating_00000.wmfeat")
    assert b.grids.shape == (2, 4, 4, 16)


def test_inputs_not_mutated(workspace):
    before = {p.name: p.read_bytes() for p in (workspace / "data").rglob("*") if p.is_file()}
    main(["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
          "--out", str(workspace / "run2")])
    after = {p.name: p.read_bytes() for p in (workspace / "data").rglob("*") if p.is_file()}
    assert before == after
    assert (workspace / "run2" / "checkpoint.wmoe").read_bytes() == \
        (workspace / "run" / "checkpoint.wmoe").read_bytes()
