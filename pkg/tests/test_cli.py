import pytest

from mtvit.cli import main, output_lock
from mtvit.errors import LockError


def write_config(tmp_path, extra=""):
    path = tmp_path / "run.ini"
    path.write_text(f"""
[run]
output_dir = {tmp_path}/out
seed = 3

[backbone]
patch_size = 4
num_layers = 3
embed_dim = 8
num_heads = 2
image_side = 16

[caption]
d_text = 8
num_layers = 1
num_heads = 2
vocab_size = 16
max_text_len = 16

[depth_head]
width = 8

[seg_head]
num_blocks = 1

[losses]
gm_scales = 2

[train]
epochs = 1
batch_cap = 4
batch_depth = 4
batch_seg = 4

[data]
warmup_dir = {tmp_path}/data
cap_dir = {tmp_path}/data
depth_dir = {tmp_path}/data
seg_dir = {tmp_path}/data
probe_fit_dir = {tmp_path}/data
probe_eval_dir = {tmp_path}/data
eval_dir = {tmp_path}/data

[probe]
steps = 10

[gen]
dir = {tmp_path}/data
n = 8
split = train
side = 16
{extra}
""")
    return path


def test_unknown_command_exits_2(capsys):
    assert main(["frobnicate", "--config", "x"]) == 2


def test_missing_config_flag_exits_2():
    assert main(["train"]) == 2


def test_bad_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nlr_backbone = -1\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_train_without_dataset_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 1
    assert "error" in capsys.readouterr().err


def test_full_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert (tmp_path / "data" / "manifest.txt").exists()

    assert main(["warmup", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert (out / "warmup.bin").exists()
    assert (out / "warmup_metrics.txt").exists()
    assert (out / "config_effective.ini").exists()
    assert not (out / "lock").exists()

    assert main(["train", "--config", str(cfg)]) == 0
    assert (out / "checkpoint.bin").exists()
    metrics = (out / "train_metrics.txt").read_text().splitlines()
    assert metrics and all("loss=" in line for line in metrics)

    assert main(["probe-seg", "--config", str(cfg)]) == 0
    seg_line = (out / "probe_seg_metrics.txt").read_text()
    assert "metric=miou" in seg_line

    assert main(["probe-depth", "--config", str(cfg)]) == 0
    depth_lines = (out / "probe_depth_metrics.txt").read_text().splitlines()
    assert len(depth_lines) == 3

    assert main(["eval", "--config", str(cfg)]) == 0
    eval_lines = (out / "eval_metrics.txt").read_text().splitlines()
    assert any("token_accuracy" in line for line in eval_lines)


def test_probe_without_checkpoint_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["probe-seg", "--config", str(cfg)]) == 1


def test_train_with_warmup_init(tmp_path):
    cfg = write_config(tmp_path, extra="")
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["warmup", "--config", str(cfg)]) == 0
    cfg2 = write_config(tmp_path)
    text = cfg2.read_text().replace("[data]", f"init_checkpoint = {tmp_path}/out/warmup.bin\n\n[data]")
    # put the key inside [train]
    text = text.replace("batch_seg = 4", f"batch_seg = 4\ninit_checkpoint = {tmp_path}/out/warmup.bin")
    cfg2.write_text(text.replace(f"init_checkpoint = {tmp_path}/out/warmup.bin\n\n[data]", "\n[data]"))
    assert main(["train", "--config", str(cfg2)]) == 0


def test_lock_rejects_concurrent_use(tmp_path):
    target = tmp_path / "locked"
    with output_lock(target):
        with pytest.raises(LockError):
            with output_lock(target):
                pass
    # released afterwards
    with output_lock(target):
        pass


def test_verify_command_smoke(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["verify", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 7 and "FAIL" not in out
