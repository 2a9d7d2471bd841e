"""Config-driven commands behind the CLI.

Artifacts live under ``<out>/<run_id>/`` in ``checkpoints``, ``samples``,
``reports`` and ``plotdata``. Every file is a deterministic function of the
config and the input files, so reruns reproduce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import config_hash, dump_config, run_id
from .denoiser import Condition, DenoiserParams, dumps_json, init_params, load_params, save_params
from .guidance import GuidanceConfig, Mode, sample_batch
from .lora import LoraAdapter, init_adapter, load_adapter, save_adapter
from .metrics import Identity, Standardized, aggregate_reports, build_report, reports_to_csv
from .metrics.report import REPORT_COLUMNS, format_value
from .schedule import NoiseSchedule, make_linear_schedule
from .train import (
    Dataset,
    TrainConfig,
    TrainMode,
    ddpm_loss,
    default_lora_components,
    draw_loss_inputs,
    make_lora_subset,
    make_toy_dataset,
    train,
)

log = logging.getLogger(__name__)

CONDITION_LABELS = {
    "LORA": "LoRA", "AUTOLORA": "AutoLoRA", "LORA_CFG": "LoRA+CFG", "AUTOLORA_CFG": "AutoLoRA+CFG",
}
PLOT_METRICS = ("diversity", "cps", "pc", "sa", "div_cps", "div_pc", "div_sa")
PROBE_SIZE = 256


class MissingArtifact(FileNotFoundError):
    pass


# -- layout ---------------------------------------------------------------------

@dataclass(frozen=True)
class RunPaths:
    root: Path

    @classmethod
    def for_config(cls, cfg: dict, out: str | Path | None = None) -> "RunPaths":
        return cls(Path(out if out is not None else cfg["output"]["dir"]) / run_id(cfg))

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def plotdata(self) -> Path:
        return self.root / "plotdata"

    @property
    def base_ckpt(self) -> Path:
        return self.checkpoints / "base.json"

    @property
    def lora_ckpt(self) -> Path:
        return self.checkpoints / "lora.json"

    @property
    def lora_sidecar(self) -> Path:
        return self.checkpoints / "lora.meta.json"

    def ensure(self) -> None:
        for d in (self.checkpoints, self.samples, self.reports, self.plotdata):
            d.mkdir(parents=True, exist_ok=True)


def _write_atomic(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(data)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


# -- builders -------------------------------------------------------------------

def build_schedule(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return make_linear_schedule(s["T"], s["beta_start"], s["beta_end"])


def build_dataset(cfg: dict) -> Dataset:
    d = cfg["data"]
    return make_toy_dataset(d["seed"], K=d["K"], modes_per_label=d["modes_per_label"],
                            n_per_mode=d["n_per_mode"], spread=d["spread"],
                            radius=d["radius"], layout=d["layout"])


def build_lora_subset(cfg: dict, data: Dataset) -> Dataset:
    d = cfg["data"]
    targets = d["lora_components"] or default_lora_components(data)
    return make_lora_subset(data, targets, d["n_examples"], d["subset_seed"])


def labels_for(cfg: dict) -> list[int]:
    labels = cfg["eval"]["labels"]
    return list(range(cfg["data"]["K"])) if labels is None else [int(y) for y in labels]


def seeds_for(cfg: dict) -> list[int]:
    s = cfg["seeds"]
    return [s["seed_base"] + k for k in range(s["n_samples_per_cell"])]


def guidance_from_config(cfg: dict, **overrides) -> GuidanceConfig:
    g = dict(cfg["guidance"])
    g.update(overrides)
    return GuidanceConfig(mode=g["mode"], w=g["w"], w1=g["w1"], w2=g["w2"], gamma=g["gamma"],
                          lora_scale=g["lora_scale"], steps=cfg["schedule"]["T"])


def _loss_csv(losses: Sequence[float]) -> str:
    return "step,loss\n" + "".join(f"{i},{l!r}\n" for i, l in enumerate(losses))


# -- train / finetune -----------------------------------------------------------

def cmd_train(cfg: dict, out: str | Path | None = None) -> Path:
    paths = RunPaths.for_config(cfg, out)
    data = build_dataset(cfg)
    m, t = cfg["model"], cfg["train"]["base"]
    params = init_params(m["init_seed"], data.points.shape[1], m["hidden_widths"], cfg["data"]["K"],
                         m["time_embed_dim"], m["cond_embed_dim"])
    result = train(params, data, TrainConfig(steps=t["steps"], batch_size=t["batch_size"],
                                             learning_rate=t["learning_rate"],
                                             p_uncond=t["p_uncond"], seed=t["seed"]),
                   build_schedule(cfg))
    paths.ensure()
    save_params(result.params, paths.base_ckpt)
    _write_atomic(paths.checkpoints / "base_loss.csv", _loss_csv(result.losses))
    _write_atomic(paths.root / "config.yaml", dump_config(cfg))
    return paths.base_ckpt


def load_base(paths: RunPaths) -> DenoiserParams:
    return load_params(_require(paths.base_ckpt, "base checkpoint (run `train` first)"))


def _probe_losses(base: DenoiserParams, adapter: LoraAdapter, subset: Dataset,
                  sched: NoiseSchedule, t: dict) -> tuple[float, float]:
    rng = np.random.default_rng(t["seed"])
    n = min(PROBE_SIZE, len(subset))
    draws = draw_loss_inputs(rng, n, sched.T, base.data_dim, t["p_uncond"])
    x0, labels = subset.points[:n], subset.labels[:n]
    base_loss, _ = ddpm_loss(base, x0, labels, draws, sched)
    lora_loss, _ = ddpm_loss(base, x0, labels, draws, sched, adapter=adapter,
                             lora_scale=t["scale"])
    return base_loss, lora_loss


def cmd_finetune(cfg: dict, out: str | Path | None = None) -> Path:
    paths = RunPaths.for_config(cfg, out)
    base = load_base(paths)
    sched = build_schedule(cfg)
    subset = build_lora_subset(cfg, build_dataset(cfg))
    t = cfg["train"]["lora"]
    fresh = init_adapter(t["seed"], base, t["rank"], alpha=t["alpha"])
    probe_base, probe_fresh = _probe_losses(base, fresh, subset, sched, t)
    result = train(base, subset,
                   TrainConfig(steps=t["steps"], batch_size=t["batch_size"],
                               learning_rate=t["learning_rate"], p_uncond=t["p_uncond"],
                               seed=t["seed"], mode=TrainMode.LORA_FINETUNE,
                               lora_scale=t["scale"]),
                   sched, adapter=fresh)
    paths.ensure()
    adapter_sha = save_adapter(result.adapter, paths.lora_ckpt)
    _write_atomic(paths.checkpoints / "lora_loss.csv", _loss_csv(result.losses))
    meta = {"base_sha256": _sha256(paths.base_ckpt), "adapter_sha256": adapter_sha,
            "probe_loss_base": probe_base, "probe_loss_fresh_adapter": probe_fresh,
            "train": t}
    _write_atomic(paths.lora_sidecar, dumps_json(meta))
    return paths.lora_ckpt


def load_models(paths: RunPaths) -> tuple[DenoiserParams, LoraAdapter]:
    """Base plus adapter, refusing an adapter trained against other base weights."""
    base = load_base(paths)
    _require(paths.lora_ckpt, "LoRA checkpoint (run `finetune` first)")
    meta = json.loads(_require(paths.lora_sidecar, "LoRA sidecar").read_text())
    actual = _sha256(paths.base_ckpt)
    if meta["base_sha256"] != actual:
        raise MissingArtifact(
            f"adapter {paths.lora_ckpt} was trained on base {meta['base_sha256'][:12]}, "
            f"but {paths.base_ckpt} hashes to {actual[:12]}")
    return base, load_adapter(paths.lora_ckpt)


# -- sampling -------------------------------------------------------------------

def samples_csv(x0_by_label: dict[int, np.ndarray], seeds: Sequence[int]) -> str:
    d = next(iter(x0_by_label.values())).shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "condition"] + [f"dim_{i}" for i in range(d)])
    for y, X in x0_by_label.items():
        for s, row in zip(seeds, X):
            w.writerow([s, y] + [repr(float(v)) for v in row])
    return buf.getvalue()


def noise_csv(xT: np.ndarray, seeds: Sequence[int]) -> str:
    """Initial noise per seed; shared by every label and every mode."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed"] + [f"dim_{i}" for i in range(xT.shape[1])])
    for s, row in zip(seeds, xT):
        w.writerow([s] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_samples(path: Path) -> dict[int, np.ndarray]:
    groups: dict[int, list[list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            groups.setdefault(int(row[1]), []).append([float(v) for v in row[2:]])
    return {y: np.array(v) for y, v in groups.items()}


def cell_key(cfg: dict, gcfg: GuidanceConfig) -> str:
    ident = {"g": gcfg.to_dict(), "seeds": cfg["seeds"], "labels": labels_for(cfg)}
    return f"{gcfg.mode.value.lower()}_{config_hash(ident)[:10]}"


def generate(base: DenoiserParams, adapter: LoraAdapter, cfg: dict, gcfg: GuidanceConfig
             ) -> tuple[dict[int, np.ndarray], np.ndarray]:
    sched = build_schedule(cfg)
    seeds = seeds_for(cfg)
    out, xT = {}, None
    with threadpool_limits(limits=1):
        for y in labels_for(cfg):
            b = sample_batch(base, adapter, sched, gcfg, Condition(y), seeds)
            out[y] = b.x0
            xT = b.xT
    return out, xT


def write_samples(paths: RunPaths, sub: str, key: str, cfg: dict, gcfg: GuidanceConfig,
                  x0: dict[int, np.ndarray], xT: np.ndarray) -> Path:
    seeds = seeds_for(cfg)
    target = paths.samples / sub / f"{key}.csv" if sub else paths.samples / f"{key}.csv"
    _write_atomic(target.with_suffix(".xT.csv"), noise_csv(xT, seeds))
    sidecar = {"guidance": gcfg.to_dict(), "seeds": seeds, "labels": labels_for(cfg),
               "run_id": run_id(cfg), "base_sha256": _sha256(paths.base_ckpt),
               "adapter_sha256": _sha256(paths.lora_ckpt)}
    _write_atomic(target.with_suffix(".json"), dumps_json(sidecar))
    _write_atomic(target, samples_csv(x0, seeds))
    return target


def cmd_sample(cfg: dict, out: str | Path | None = None, **overrides) -> Path:
    paths = RunPaths.for_config(cfg, out)
    base, adapter = load_models(paths)
    gcfg = guidance_from_config(cfg, **overrides)
    x0, xT = generate(base, adapter, cfg, gcfg)
    paths.ensure()
    return write_samples(paths, "", cell_key(cfg, gcfg), cfg, gcfg, x0, xT)


# -- evaluation -----------------------------------------------------------------

def extractor_for(cfg: dict, data: Dataset):
    if cfg["eval"]["extractor"] == "standardized":
        return Standardized.fit(data.points)
    return Identity()


def evaluate(cfg: dict, x0: dict[int, np.ndarray], gcfg: GuidanceConfig | None) -> dict:
    data = build_dataset(cfg)
    subset = build_lora_subset(cfg, data)
    extractor = extractor_for(cfg, data)
    bands = [tuple(b) for b in cfg["eval"]["bands"]]
    reports = [
        build_report(X, extractor, subset.generator_spec.for_label(y), subset.generator_spec,
                     gcfg, Condition(y), prompt_spec=data.generator_spec.for_label(y),
                     bands=bands, anchor_sigma=cfg["eval"]["anchor_sigma"])
        for y, X in x0.items()
    ]
    return aggregate_reports(reports).row()


def cmd_eval(cfg: dict, samples: str | Path, out: str | Path | None = None) -> Path:
    samples = _require(Path(samples), "samples file")
    sidecar = samples.with_suffix(".json")
    gcfg = None
    if sidecar.exists():
        gcfg = GuidanceConfig(**json.loads(sidecar.read_text())["guidance"])
    row = evaluate(cfg, read_samples(samples), gcfg)
    paths = RunPaths.for_config(cfg, out)
    paths.ensure()
    target = paths.reports / (samples.stem + ".csv")
    _write_atomic(target, reports_to_csv([row]))
    return target


# -- sweep ----------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    condition: str
    guidance: GuidanceConfig

    @property
    def label(self) -> str:
        return CONDITION_LABELS[self.condition]


def sweep_cells(cfg: dict) -> list[Cell]:
    """Grid order: lora scale, then condition, then CFG scale, then gamma."""
    sw, T = cfg["sweep"], cfg["schedule"]["T"]
    cells: list[Cell] = []
    for s in sw["lora_scales"]:
        for cond in sw["conditions"]:
            ws = sw["cfg"] if cond in ("LORA_CFG", "AUTOLORA_CFG") else [1.0]
            gs = sw["gamma"] if cond in ("AUTOLORA", "AUTOLORA_CFG") else [1.0]
            for w in ws:
                for g in gs:
                    if cond == "LORA":
                        gc = GuidanceConfig(Mode.VANILLA, lora_scale=s, steps=T)
                    elif cond == "AUTOLORA":
                        gc = GuidanceConfig(Mode.AUTOLORA_PLAIN, gamma=g, lora_scale=s, steps=T)
                    elif cond == "LORA_CFG":
                        gc = GuidanceConfig(Mode.CFG, w=w, lora_scale=s, steps=T)
                    else:
                        gc = GuidanceConfig(Mode.AUTOLORA_CFG, w1=w, w2=w, gamma=g,
                                            lora_scale=s, steps=T)
                    cells.append(Cell(cond, gc))
    return cells


def _cell_paths(paths: RunPaths, key: str) -> tuple[Path, Path]:
    report = paths.reports / "sweep" / f"{key}.csv"
    return report, report.with_suffix(".done")


def run_cell(cfg: dict, root: str, cell: Cell) -> str:
    """Sample and score one cell; returns its single data line (no header)."""
    paths = RunPaths(Path(root))
    key = cell_key(cfg, cell.guidance)
    base, adapter = load_models(paths)
    x0, xT = generate(base, adapter, cfg, cell.guidance)
    write_samples(paths, "sweep", key, cfg, cell.guidance, x0, xT)
    text = reports_to_csv([evaluate(cfg, x0, cell.guidance)])
    report, marker = _cell_paths(paths, key)
    _write_atomic(report, text)
    _write_atomic(marker, "")
    return text.split("\n", 1)[1]


def _pin_blas() -> None:
    threadpool_limits(limits=1)


def _plot_rows(cfg: dict, cells: list[Cell], rows: list[dict]) -> tuple[str, str | None]:
    sw = cfg["sweep"]
    multi = len(sw["cfg"]) > 1 or len(sw["gamma"]) > 1

    def series(cell: Cell, metric: str, with_w: bool = True) -> str:
        g = cell.guidance
        name = cell.label
        if multi:
            parts = []
            if with_w and cell.condition in ("LORA_CFG", "AUTOLORA_CFG"):
                parts.append(f"w={g.w if cell.condition == 'LORA_CFG' else g.w1}")
            if cell.condition in ("AUTOLORA", "AUTOLORA_CFG"):
                parts.append(f"gamma={g.gamma}")
            if parts:
                name += " (" + ", ".join(parts) + ")"
        return f"{name}:{metric}"

    def emit(points) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "series", "value"])
        w.writerows(points)
        return buf.getvalue()

    by_scale = [(format_value(c.guidance.lora_scale), series(c, m), format_value(r[m]))
                for c, r in zip(cells, rows) for m in PLOT_METRICS]
    cfg_curve = None
    if len(sw["cfg"]) > 1:
        pts = []
        for c, r in zip(cells, rows):
            if c.condition not in ("LORA_CFG", "AUTOLORA_CFG"):
                continue
            w_val = c.guidance.w if c.condition == "LORA_CFG" else c.guidance.w1
            tag = series(c, "", with_w=False)[:-1] + f" @ lora_scale={c.guidance.lora_scale}"
            pts.extend((format_value(w_val), f"{tag}:{m}", format_value(r[m]))
                       for m in PLOT_METRICS)
        cfg_curve = emit(pts)
    return emit(by_scale), cfg_curve


def _parse_row(line: str) -> dict:
    values = next(csv.reader([line]))
    row = {}
    for col, v in zip(REPORT_COLUMNS, values):
        row[col] = v if col == "mode" else (int(v) if col == "n_samples" else float(v))
    return row


def cmd_sweep(cfg: dict, out: str | Path | None = None, jobs: int = 1,
              resume: bool = False) -> Path:
    paths = RunPaths.for_config(cfg, out)
    load_models(paths)  # fail fast on missing or mismatched checkpoints
    paths.ensure()
    cells = sweep_cells(cfg)
    lines: list[str | None] = [None] * len(cells)
    todo = []
    for i, cell in enumerate(cells):
        report, marker = _cell_paths(paths, cell_key(cfg, cell.guidance))
        if resume and marker.exists() and report.exists():
            lines[i] = report.read_text().split("\n", 1)[1]
        else:
            marker.unlink(missing_ok=True)
            todo.append(i)
    log.info("sweep: %d cells, %d to run", len(cells), len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_pin_blas) as pool:
            futures = {i: pool.submit(run_cell, cfg, str(paths.root), cells[i]) for i in todo}
            for i, fut in futures.items():
                lines[i] = fut.result()
    else:
        for i in todo:
            lines[i] = run_cell(cfg, str(paths.root), cells[i])
    header = ",".join(REPORT_COLUMNS) + "\n"
    final = paths.reports / "sweep.csv"
    _write_atomic(final, header + "".join(lines))
    rows = [_parse_row(l.rstrip("\n")) for l in lines]
    by_scale, cfg_curve = _plot_rows(cfg, cells, rows)
    _write_atomic(paths.plotdata / "sweep_lora_scale.csv", by_scale)
    if cfg_curve is not None:
        _write_atomic(paths.plotdata / "sweep_cfg_scale.csv", cfg_curve)
    return final
