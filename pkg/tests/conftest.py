import numpy as np
import pytest

from autolora.denoiser import init_params
from autolora.lora import init_adapter
from autolora.schedule import make_default_schedule, make_linear_schedule
from autolora.config import load_config
from autolora.pipeline import (
    RunPaths,
    build_dataset,
    build_lora_subset,
    cmd_finetune,
    cmd_train,
    load_models,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_sched():
    return make_linear_schedule(20, 0.005, 0.5)


@pytest.fixture(scope="session")
def sched200():
    return make_default_schedule(200)


@pytest.fixture(scope="session")
def random_base():
    return init_params(3, 2, [16, 16], 4, 8, 6)


@pytest.fixture(scope="session")
def random_adapter(random_base):
    """Adapter with nonzero B so it actually changes predictions."""
    ad = init_adapter(5, random_base, 2)
    rng = np.random.default_rng(9)
    arrays = [a if i % 2 == 0 else 0.5 * rng.standard_normal(a.shape)
              for i, a in enumerate(ad.arrays())]
    return ad.with_arrays(arrays)


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory):
    """Base model plus overfit adapter trained with the default configuration."""
    cfg = load_config()
    out = tmp_path_factory.mktemp("trained_toy")
    cmd_train(cfg, out)
    cmd_finetune(cfg, out)
    paths = RunPaths.for_config(cfg, out)
    base, adapter = load_models(paths)
    losses = np.loadtxt(paths.checkpoints / "base_loss.csv", delimiter=",", skiprows=1)[:, 1]
    data = build_dataset(cfg)
    return {"data": data, "subset": build_lora_subset(cfg, data), "base": base,
            "adapter": adapter, "base_losses": list(losses)}


# -- acceptance reporting ---------------------------------------------------------

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    n, title = marker.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "seconds": 0.0, "notes": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["seconds"] += rep.duration
    entry["notes"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']} ({e['seconds']:.1f}s)"
        if e["notes"]:
            line += "  " + "; ".join(e["notes"])
        terminalreporter.write_line(line)
