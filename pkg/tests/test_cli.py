import json

import yaml

from conftest import SMALL_PHANTOMS
from semisam.cli import build_parser, main
from semisam.volumes import list_cases


def write_config(tmp_path, data_dir):
    raw = {
        "data": {"root": str(data_dir), "m_labeled": 2, "n_test": 2, "seed": 3, "patch_shape": [16, 16, 16]},
        "framework": {"base": "mt", "variant": "semisam"},
        "backbone": {"base_width": 4, "depth": 2},
        "train": {"t_max": 6, "eval_every": 6, "checkpoint_every": 3, "seed": 1},
        "output_dir": "run",
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_parser_requires_subcommand():
    import pytest

    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_end_to_end(tmp_path, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({k: list(v) if isinstance(v, tuple) else v for k, v in SMALL_PHANTOMS.items()}))
    data = tmp_path / "data"
    assert main(["gen-synth", "--spec", str(spec), "--out", str(data)]) == 0
    assert len(list_cases(data)) == 8
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["cases"]) == 8

    cfg = write_config(tmp_path, data)
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    for name in ("train_log.csv", "train_log.png", "checkpoint_final.pt", "metrics_t000006.png"):
        assert (run / name).exists(), name

    capsys.readouterr()
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run / "checkpoint_final.pt"), "--data", str(data), "--out", str(out)]) == 0
    mean = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(mean) == {"dice", "jaccard", "asd", "hd95"}
    for name in ("metrics.csv", "metrics.json", "metrics.png"):
        assert (out / name).exists(), name
    # eval through the CLI agrees with the report written during training
    trained = json.loads((run / "metrics_t000006.json").read_text())["mean"]
    assert abs(trained["dice"] - mean["dice"]) < 1e-9

    prompts = tmp_path / "prompts.json"
    assert main(["export-prompts", "--checkpoint", str(run / "checkpoint_final.pt"), "--data", str(data),
                 "--out", str(prompts), "--k", "2"]) == 0
    payload = json.loads(prompts.read_text())
    assert payload["k_positive"] == 2 and len(payload["cases"]) == 8


def test_resume_via_cli(tmp_path):
    from semisam.volumes import PhantomDatasetSpec, write_phantom_dataset

    data = tmp_path / "data"
    write_phantom_dataset(PhantomDatasetSpec(**SMALL_PHANTOMS), data)
    cfg = write_config(tmp_path, data)
    assert main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "a"), "--no-figures"]) == 0
    full = (tmp_path / "a" / "train_log.csv").read_text()
    assert main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "b"), "--no-figures",
                 "--resume", str(tmp_path / "a" / "checkpoint_t000003.pt")]) == 0
    tail = (tmp_path / "b" / "train_log.csv").read_text().splitlines()
    assert tail[0] == full.splitlines()[0]
    assert tail[1:] == full.splitlines()[4:]
    assert not (tmp_path / "b" / "train_log.png").exists()


def test_shipped_configs_parse():
    from pathlib import Path

    from semisam.config import load_config
    from semisam.desk import trend_phantoms
    from semisam.volumes import PhantomDatasetSpec

    root = Path(__file__).resolve().parents[1] / "configs"
    full = load_config(root / "la_full.yaml")
    assert full.train.t_max == 6000 and tuple(full.data.patch_shape) == (128, 128, 128)
    assert load_config(root / "desk_semisam_mt.yaml").framework.name == "mt/semisam"
    spec = PhantomDatasetSpec.from_dict(yaml.safe_load((root / "phantoms_trend.yaml").read_text()))
    assert spec == trend_phantoms()
