import pytest

from autolora.config import DEFAULTS, ConfigError, load_config, parse_override, run_id


def test_defaults_mirror_protocol():
    cfg = load_config()
    assert cfg["guidance"]["w"] == 5.0 and cfg["guidance"]["gamma"] == 1.5
    assert cfg["sweep"]["lora_scales"] == [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1,
                                           1.2, 1.3]
    assert cfg["train"]["lora"]["steps"] == 3000 and cfg["data"]["n_examples"] == 32


def test_file_and_override_layering(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  base:\n    steps: 10\nsweep:\n  cfg: [1, 3]\n")
    cfg = load_config(p, ["train.base.steps=20", "guidance.mode=CFG", "data.lora_components=[1,5]"])
    assert cfg["train"]["base"]["steps"] == 20
    assert cfg["sweep"]["cfg"] == [1, 3]
    assert cfg["guidance"]["mode"] == "CFG"
    assert cfg["data"]["lora_components"] == [1, 5]
    assert DEFAULTS["train"]["base"]["steps"] == 8000  # defaults untouched


@pytest.mark.parametrize("override,needle", [
    ("train.base.stepz=3", "train.base.stepz"),
    ("nope=1", "nope"),
    ("train.base=3", "train.base"),
    ("train.base.steps=abc", "integer"),
    ("seeds.n_samples_per_cell=1", ">= 2"),
    ("sweep.lora_scales=[]", "nonempty"),
    ("sweep.conditions=[LORA, FOO]", "FOO"),
])
def test_bad_configs_name_the_problem(override, needle):
    with pytest.raises(ConfigError, match=needle.replace("[", r"\[")):
        load_config(None, [override])


def test_unknown_key_in_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model:\n  widths: [3]\n")
    with pytest.raises(ConfigError, match="model.widths"):
        load_config(p)


def test_override_syntax():
    assert parse_override("a.b=1.5") == ("a.b", 1.5)
    with pytest.raises(ConfigError):
        parse_override("a.b")


def test_run_id_tracks_model_sections_only():
    a = load_config()
    assert run_id(a) == run_id(load_config(None, ["guidance.w=2.0", "sweep.gamma=[1.0]"]))
    assert run_id(a) != run_id(load_config(None, ["train.base.steps=5"]))
