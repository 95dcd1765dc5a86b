import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsmc import cli
from dsmc import config as C
from dsmc import data as D
from dsmc.training import evaluate

TINY_CFG = """
[model]
channels = 8
group_sizes = 1, 1, 1, 1
growth = 4
bottleneck = 8
mscu_channels = 8
mscu_resnet_depth = 1
dresnet_depth = 1
[train]
batch = 1
patch = 8
iterations = 3
log_every = 1
checkpoint_every = 2
"""


# ---------------------------------------------------------------- config

def test_default_roundtrip_is_fixpoint():
    for cfg in (C.Config(), C.Config.desk()):
        text = C.serialize(cfg)
        again = C.parse(text)
        assert again == cfg
        assert C.serialize(again) == text


@settings(max_examples=40, deadline=None)
@given(lr=st.floats(1e-6, 1.0), batch=st.integers(1, 64), aug=st.booleans(),
       abl=st.lists(st.sampled_from(["no_mscu", "no_dual", "no_perceptual"]), unique=True),
       disp=st.floats(0, 64, allow_nan=False), fmt=st.sampled_from(["png", "ppm"]))
def test_roundtrip_property(lr, batch, aug, abl, disp, fmt):
    cfg = C.Config(train=C.TrainConfig(lr=lr, batch=batch, augment=aug, ablations=tuple(abl)),
                   data=C.DataConfig(displacement=disp, format=fmt))
    text = C.serialize(cfg)
    assert C.parse(text) == cfg
    assert C.serialize(C.parse(text)) == text


@pytest.mark.parametrize("text,msg", [
    ("[train]\nlearning_rate = 1\n", "unknown key"),
    ("[optim]\nlr = 1\n", "unknown section"),
    ("lr = 1\n", "outside"),
    ("[train]\nbatch = two\n", "cannot parse"),
    ("[train]\nablations = no_everything\n", "unknown ablation"),
    ("[data]\nformat = jpg\n", "png or ppm"),
])
def test_parse_rejects(text, msg):
    with pytest.raises(C.ConfigError, match=msg):
        C.parse(text)


def test_comments_and_partial_override():
    cfg = C.parse("# top\n[train]\nbatch = 3  # small\n", C.Config.desk())
    assert cfg.train.batch == 3 and cfg.train.patch == C.TrainConfig.desk().patch


# ---------------------------------------------------------------- cli

@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return str(p)


@pytest.fixture
def synth(tmp_path, tiny_cfg):
    out = tmp_path / "data"
    rc = cli.main(["prepare", "--synth", "--out-dir", str(out), "--clips", "2", "--test-clips", "1",
                   "--frames", "5", "--size", "32", "--displacement", "4", "--config", tiny_cfg])
    assert rc == 0
    return out


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for section, items in C.all_keys().items():
        assert f"[{section}]" in out
        for key, _ in items:
            assert f"    {key} = " in out


def test_usage_errors_exit_1(capsys):
    assert cli.main(["train", "--out", "x", "--set", "train.nope=1"]) == 1
    assert cli.main(["prepare"]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    assert cli.main(["flops", "--shape", "1,2,3"]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    assert cli.main(["eval", "--bicubic", "--data", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "hr" / "clip0"
    bad.mkdir(parents=True)
    (bad / "frame_00000000.ppm").write_bytes(b"P6\n4 4\n255\ngarbage")
    assert cli.main(["prepare", "--hr-dir", str(tmp_path / "hr"), "--out-dir", str(tmp_path / "o")]) == 2
    assert "frame_00000000.ppm" in capsys.readouterr().err


def test_seed_env_and_flag(monkeypatch):
    args = cli.build_parser().parse_args(["flops"])
    monkeypatch.setenv("DSMC_SEED", "17")
    cfg = cli.build_config(args)
    assert cfg.train.seed == cfg.model.seed == cfg.data.seed == 17
    args = cli.build_parser().parse_args(["flops", "--seed", "5"])
    assert cli.build_config(args).train.seed == 5
    monkeypatch.setenv("DSMC_SEED", "x")
    assert cli.main(["flops"]) == 1


def test_prepare_zero_displacement_static(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["prepare", "--synth", "--out-dir", str(out), "--clips", "1", "--test-clips", "0",
                     "--frames", "4", "--size", "32", "--displacement", "0", "--seed", "9"]) == 0
    clip = D.read_clip(out / "train" / "hr" / "train_000")
    for f in clip.frames[1:]:
        assert np.array_equal(f, clip.frames[0])
    man = D.read_manifest(out / "manifest.txt")
    assert man["seed"] == "9" and float(man["displacement"]) == 0.0


def test_prepare_hr_dir_scale(tmp_path):
    src = tmp_path / "hr" / "a"
    src.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(3):
        D.write_frame(src / D.FRAME_PATTERN.format(i, "png"), rng.uniform(0, 1, (3, 64, 64)))
    assert cli.main(["prepare", "--hr-dir", str(tmp_path / "hr"), "--out-dir", str(tmp_path / "o"),
                     "--scale", "4"]) == 0
    lr = D.read_clip(tmp_path / "o" / "lr" / "a")
    assert len(lr) == 3 and lr.frames[0].shape == (3, 16, 16)


def test_train_eval_infer(synth, tmp_path, tiny_cfg, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(synth), "--out", str(run), "--config", tiny_cfg]) == 0
    for name in ("config.txt", "loss.csv", "checkpoint.ckpt"):
        assert (run / name).exists()
    assert C.load(run / "config.txt").train.iterations == 3
    # resume continues from k + 1
    assert cli.main(["train", "--data", str(synth), "--out", str(run), "--config", tiny_cfg,
                     "--set", "train.iterations=5", "--resume", str(run / "checkpoint.ckpt")]) == 0
    iters = [int(l.split(",")[0]) for l in (run / "loss.csv").read_text().splitlines()[1:]]
    assert iters == [1, 2, 3, 4, 5]

    capsys.readouterr()
    assert cli.main(["eval", "--data", str(synth), "--bicubic", "--report", str(tmp_path / "r.csv")]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    ref = evaluate(None, D.read_clips(synth / "test" / "hr")).mean()
    assert float(line.split("\t")[1].split()[0]) == pytest.approx(ref[0], abs=1e-4)
    assert (tmp_path / "r.csv").read_text().startswith("clip")
    assert cli.main(["eval", "--data", str(synth), "--ckpt", str(run / "checkpoint.ckpt")]) == 0

    lr_dir = synth / "test" / "lr" / "test_000"
    outs = []
    for k in range(2):
        o = tmp_path / f"sr{k}"
        assert cli.main(["infer", "--ckpt", str(run / "checkpoint.ckpt"), "--clip", str(lr_dir),
                         "--out", str(o)]) == 0
        outs.append(o)
    lr = D.read_clip(lr_dir)
    sr = D.read_clip(outs[0])
    assert len(sr) == len(lr) and sr.frames[0].shape[-2:] == tuple(4 * s for s in lr.frames[0].shape[-2:])
    for a, b in zip(sorted(outs[0].glob("*.ppm")), sorted(outs[1].glob("*.ppm"))):
        assert a.read_bytes() == b.read_bytes()


def test_ablate_no_flags_single_row(synth, tmp_path, tiny_cfg, capsys):
    out = tmp_path / "abl.csv"
    assert cli.main(["ablate", "--data", str(synth), "--config", tiny_cfg, "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("baseline")
    assert cli.main(["ablate", "--data", str(synth), "--flags", "no_magic"]) == 1


def test_flops_prints_ratio(capsys):
    assert cli.main(["flops", "--shape", "1,64,5,32,32"]) == 0
    out = capsys.readouterr().out
    ratio = float(next(l for l in out.splitlines() if l.startswith("ratio")).split("\t")[1])
    assert 3.5 <= ratio <= 4.4
