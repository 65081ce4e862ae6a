"""Experiment protocols over a fixed evaluation subset.

Four protocols are supported:

``budget_sweep``     minimum-token search up to max(K grid), binned cumulatively
``patchsize_sweep``  fixed K, one token attack per patch side in the q grid
``mixed_norm``       token attack per K with an l-inf ball of radius epsilon
``sparse_vs_patch``  1x1-block attack vs an equal-pixel-budget patch attack

Every protocol produces per-image detail rows first; the summary table is
computed from the *formatted* detail rows, so re-summarizing a detail CSV
reproduces the summary CSV byte for byte.

Units in the CSVs: ``epsilon`` and ``linf`` are fractions of the raw pixel
range (1/255 is one gray level); ``l0`` counts changed pixel values.
"""

from collections import OrderedDict
import csv
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
import io
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import _kernels
from .attack import (
    AttackBudget,
    BlockPartition,
    min_token_search_batch,
    scale_budget,
    sparse_attack_batch,
    sparse_pixel_budget,
    token_attack_batch,
)
from .checkpoint import load_checkpoint
from .data import load_dataset, select_eval_subset
from .errors import ConfigError

log = logging.getLogger(__name__)

EXPERIMENTS = ("budget_sweep", "patchsize_sweep", "mixed_norm", "sparse_vs_patch")
SUMMARY_FIELDS = [
    "model", "experiment", "K", "q", "epsilon",
    "clean_acc", "robust_acc", "mean_iters", "mean_linf", "mean_l0",
]
DETAIL_FIELDS = [
    "model", "experiment", "K", "q", "epsilon",
    "image", "label", "pre_broken", "success", "min_k", "iterations", "linf", "l0",
]
DENOMINATOR_NOTE = (
    "robust_acc = images still correctly classified after attack / subset size; "
    "cleanly misclassified images count as broken at K=0"
)


@dataclass
class ExperimentConfig:
    experiment: str = "budget_sweep"
    checkpoints: dict = field(default_factory=dict)  # model id -> checkpoint path
    dataset: str = "mnist"
    data_root: str = "data/mnist"
    subset_size: int = 300
    subset_seed: int = 0
    k_grid: tuple = (1, 2, 5)
    q_grid: tuple = (1, 2, 4)
    q: int = None  # partition side for K-based protocols; default: the model's token side
    k_fixed: int = 5  # K of the patch-size sweep
    base_size: tuple = None  # (H, W) the K values refer to; rescaled to the data if set
    epsilon: float = 1.0 / 255.0  # fraction of the raw pixel range
    eta: float = 0.1
    eta_overrides: dict = field(default_factory=dict)
    max_iters: int = 100
    saliency: str = "grad_l2"
    step_rule: str = "raw"
    sparse_fraction: float = 0.005
    workers: int = 1
    batch_size: int = 100
    out_dir: str = "runs"

    def __post_init__(self):
        self.k_grid = tuple(int(k) for k in self.k_grid)
        self.q_grid = tuple(int(q) for q in self.q_grid)
        if self.base_size is not None:
            self.base_size = tuple(int(v) for v in self.base_size)
        self.checkpoints = OrderedDict((str(k), str(v)) for k, v in dict(self.checkpoints).items())
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if not self.k_grid or not self.q_grid:
            raise ConfigError("K and q grids must be non-empty")
        if min(self.k_grid) < 1 or min(self.q_grid) < 1 or self.k_fixed < 1:
            raise ConfigError("grid values must be positive")
        if self.q is not None and self.q < 1:
            raise ConfigError("q must be positive")
        if self.subset_size < 1:
            raise ConfigError("subset_size must be >= 1")
        if self.max_iters < 1 or not self.eta > 0:
            raise ConfigError("need eta > 0 and max_iters >= 1")
        if any(not v > 0 for v in self.eta_overrides.values()):
            raise ConfigError("eta overrides must be > 0")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.workers < 1 or self.batch_size < 1:
            raise ConfigError("workers and batch_size must be >= 1")
        if self.saliency not in ("grad_l2", "jsma_plus"):
            raise ConfigError(f"unknown saliency mode {self.saliency!r}")
        if self.step_rule not in ("raw", "sign"):
            raise ConfigError(f"unknown step rule {self.step_rule!r}")

    def check_shape(self, height, width, model_q=None):
        sides = list(self.q_grid) if self.experiment == "patchsize_sweep" else []
        sides.append(self.q or model_q or 1)
        for q in sides:
            if height % q or width % q:
                raise ConfigError(f"patch side {q} does not divide {height}x{width}")

    def scaled_k(self, k, height, width):
        if self.base_size is None:
            return k
        return scale_budget(k, self.base_size[0], self.base_size[1], height, width)

    def to_dict(self):
        d = asdict(self)
        d["checkpoints"] = dict(self.checkpoints)
        d["k_grid"] = list(self.k_grid)
        d["q_grid"] = list(self.q_grid)
        d["base_size"] = list(self.base_size) if self.base_size else None
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)


@dataclass
class RobustnessReport:
    experiment: str
    rows: list = field(default_factory=list)  # dicts keyed by SUMMARY_FIELDS, values as strings
    details: list = field(default_factory=list)  # dicts keyed by DETAIL_FIELDS, values as strings
    notes: list = field(default_factory=list)


# --------------------------------------------------------------- formatting


def _f4(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def _g(v):
    return f"{v:.9g}"


def _eps_str(eps):
    return "none" if eps is None else _f4(eps)


def summarize_details(details):
    """Summary rows (sorted) computed from formatted detail rows.

    Means of iterations, l-inf and l0 are over images the attack flipped
    (pre-broken images excluded); ``nan`` when there are none.
    """
    groups = OrderedDict()
    for d in details:
        key = (d["model"], d["experiment"], int(d["K"]), int(d["q"]), d["epsilon"])
        groups.setdefault(key, []).append(d)
    rows = []
    for (model, exp, k, q, eps), ds in groups.items():
        n = len(ds)
        clean = sum(d["pre_broken"] == "0" for d in ds)
        robust = sum(d["success"] == "0" for d in ds)
        won = [d for d in ds if d["success"] == "1" and d["pre_broken"] == "0"]

        def avg(col):
            return float(np.mean([float(d[col]) for d in won])) if won else None

        rows.append(
            {
                "model": model,
                "experiment": exp,
                "K": str(k),
                "q": str(q),
                "epsilon": eps,
                "clean_acc": _f4(clean / n),
                "robust_acc": _f4(robust / n),
                "mean_iters": _f4(avg("iterations")),
                "mean_linf": _f4(avg("linf")),
                "mean_l0": _f4(avg("l0")),
            }
        )
    rows.sort(key=lambda r: (r["model"], r["experiment"], int(r["K"]), int(r["q"])))
    return rows


def csv_text(rows, header):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def detail_path(path):
    path = Path(path)
    return path.with_name(path.stem + "_detail" + path.suffix)


def emit_report(report, path):
    """Write the summary CSV to ``path`` and the detail CSV next to it."""
    path = Path(path)
    try:
        path.write_text(csv_text(report.rows, SUMMARY_FIELDS), encoding="utf-8")
        detail_path(path).write_text(csv_text(report.details, DETAIL_FIELDS), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------- running


@dataclass
class _Target:
    name: str
    model: object
    meta: dict


def _load_targets(cfg):
    if not cfg.checkpoints:
        raise ConfigError("no checkpoints configured")
    targets = []
    for name, path in cfg.checkpoints.items():
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint for {name!r} not found: {path}")
        model, meta = load_checkpoint(path)
        targets.append(_Target(name, model.requires_grad_(False), meta))
    return targets


def load_subset(cfg):
    data = load_dataset(cfg.dataset, cfg.data_root, "test")
    return select_eval_subset(data, cfg.subset_size, cfg.subset_seed)


def _detail(name, exp, k, q, eps, idx, outcome, linf_raw, min_k=None):
    if min_k is None:
        success = outcome.success
    else:
        success = 0 <= min_k <= k
    return {
        "model": name,
        "experiment": exp,
        "K": str(k),
        "q": str(q),
        "epsilon": _eps_str(eps),
        "image": str(int(idx)),
        "label": str(outcome.label),
        "pre_broken": "1" if outcome.pre_broken else "0",
        "success": "1" if success else "0",
        "min_k": "" if min_k is None else str(int(min_k)),
        "iterations": str(outcome.iterations),
        "linf": _g(linf_raw),
        "l0": str(outcome.l0),
    }


def _raw_linf(outcomes, x, std):
    """Per-outcome l-inf of the perturbation in raw pixel-range units."""
    out = []
    for o, xi in zip(outcomes, x):
        d = (o.x_adv.astype(np.float64) - xi.astype(np.float64)) * std
        out.append(float(np.abs(d).max()) if d.size else 0.0)
    return out


class Harness:
    """Runs one :class:`ExperimentConfig` against its checkpoints and subset."""

    def __init__(self, cfg, subset=None, targets=None):
        self.cfg = cfg
        self.subset = subset if subset is not None else load_subset(cfg)
        self.targets = targets if targets is not None else _load_targets(cfg)
        c, h, w = self.subset.shape
        for t in self.targets:
            if t.model.spec.input_shape != (c, h, w):
                raise ConfigError(f"model {t.name!r} expects {t.model.spec.input_shape}, data is {(c, h, w)}")
            cfg.check_shape(h, w, t.model.spec.patch)
        self.norm = self.subset.normalization
        self.pixel_range = self.norm.pixel_range(c)
        self.std = np.asarray(self.norm._stats(c)[1], dtype=np.float64)

    def _budget(self, target, k, epsilon=None):
        eps = None if epsilon is None else self.norm.gray_level(epsilon * 255.0, self.subset.shape[0])
        return AttackBudget(
            k=k,
            epsilon=eps,
            eta=self.cfg.eta_overrides.get(target.name, self.cfg.eta),
            max_iters=self.cfg.max_iters,
            saliency_mode=self.cfg.saliency,
            step_rule=self.cfg.step_rule,
        )

    def _q(self, target):
        return self.cfg.q or target.model.spec.patch

    def _attack(self, target, part, budget):
        x, y = self.subset.images, self.subset.labels
        outs = token_attack_batch(
            target.model, x, y, part, budget, self.pixel_range, self.cfg.batch_size, self.cfg.workers
        )
        return outs, _raw_linf(outs, x, self.std)

    # -- protocols

    def budget_sweep(self):
        cfg, (c, h, w) = self.cfg, self.subset.shape
        details = []
        ks = sorted({cfg.scaled_k(k, h, w) for k in cfg.k_grid})
        for t in self.targets:
            q = self._q(t)
            part = BlockPartition(c, h, w, q)
            k_max = max(ks)
            if k_max > part.num_blocks:
                raise ConfigError(f"K={k_max} exceeds the {part.num_blocks} blocks of q={q}")
            log.info("budget sweep %s: q=%d, K up to %d", t.name, q, k_max)
            min_k, outs = min_token_search_batch(
                t.model, self.subset.images, self.subset.labels, part, k_max,
                self._budget(t, 1), self.pixel_range, cfg.batch_size, cfg.workers,
            )
            linf = _raw_linf(outs, self.subset.images, self.std)
            for k in ks:
                for idx, o, li, mk in zip(self.subset.indices, outs, linf, min_k):
                    details.append(_detail(t.name, "budget_sweep", k, q, None, idx, o, li, mk))
        return self._report("budget_sweep", details)

    def patchsize_sweep(self):
        cfg, (c, h, w) = self.cfg, self.subset.shape
        k = cfg.scaled_k(cfg.k_fixed, h, w)
        details, notes = [], []
        for t in self.targets:
            robust = []
            for q in sorted(cfg.q_grid):
                part = BlockPartition(c, h, w, q)
                if k > part.num_blocks:
                    raise ConfigError(f"K={k} exceeds the {part.num_blocks} blocks of q={q}")
                log.info("patch-size sweep %s: q=%d, K=%d", t.name, q, k)
                outs, linf = self._attack(t, part, self._budget(t, k))
                rows = [_detail(t.name, "patchsize_sweep", k, q, None, i, o, li)
                        for i, o, li in zip(self.subset.indices, outs, linf)]
                details.extend(rows)
                robust.append((q, sum(r["success"] == "0" for r in rows)))
            for (q0, r0), (q1, r1) in zip(robust, robust[1:]):
                if r1 > r0:
                    msg = f"{t.name}: robust count rises from {r0} at q={q0} to {r1} at q={q1}"
                    log.warning("patch-size monotonicity: %s", msg)
                    notes.append(msg)
        return self._report("patchsize_sweep", details, notes)

    def mixed_norm(self):
        cfg, (c, h, w) = self.cfg, self.subset.shape
        if cfg.epsilon is None:
            raise ConfigError("mixed_norm needs epsilon")
        details = []
        for t in self.targets:
            q = self._q(t)
            part = BlockPartition(c, h, w, q)
            for k in sorted({cfg.scaled_k(k, h, w) for k in cfg.k_grid}):
                log.info("mixed norm %s: q=%d, K=%d, eps=%.5f", t.name, q, k, cfg.epsilon)
                outs, linf = self._attack(t, part, self._budget(t, k, cfg.epsilon))
                details.extend(
                    _detail(t.name, "mixed_norm", k, q, cfg.epsilon, i, o, li)
                    for i, o, li in zip(self.subset.indices, outs, linf)
                )
        return self._report("mixed_norm", details)

    def sparse_vs_patch(self):
        cfg, (c, h, w) = self.cfg, self.subset.shape
        details = []
        x, y = self.subset.images, self.subset.labels
        for t in self.targets:
            q = self._q(t)
            s = sparse_pixel_budget(h, w, cfg.sparse_fraction, q)
            k_patch = s // (q * q)
            log.info("sparse vs patch %s: s=%d pixels vs K=%d tokens of %dx%d", t.name, s, k_patch, q, q)
            sparse = sparse_attack_batch(
                t.model, x, y, s, self._budget(t, s), self.pixel_range, cfg.batch_size, cfg.workers
            )
            sparse_linf = _raw_linf(sparse, x, self.std)
            patch, patch_linf = self._attack(t, BlockPartition(c, h, w, q), self._budget(t, k_patch))
            for outs, linf, k, qq in ((sparse, sparse_linf, s, 1), (patch, patch_linf, k_patch, q)):
                details.extend(
                    _detail(t.name, "sparse_vs_patch", k, qq, None, i, o, li)
                    for i, o, li in zip(self.subset.indices, outs, linf)
                )
        return self._report("sparse_vs_patch", details)

    def _report(self, experiment, details, notes=()):
        return RobustnessReport(experiment, summarize_details(details), details, list(notes))

    def run(self):
        return getattr(self, self.cfg.experiment)()


def run_budget_sweep(cfg, **kw):
    return Harness(replace_experiment(cfg, "budget_sweep"), **kw).run()


def run_patchsize_sweep(cfg, **kw):
    return Harness(replace_experiment(cfg, "patchsize_sweep"), **kw).run()


def run_mixed_norm(cfg, **kw):
    return Harness(replace_experiment(cfg, "mixed_norm"), **kw).run()


def run_sparse_vs_patch(cfg, **kw):
    return Harness(replace_experiment(cfg, "sparse_vs_patch"), **kw).run()


def replace_experiment(cfg, experiment):
    if cfg.experiment == experiment:
        return cfg
    return ExperimentConfig.from_dict({**cfg.to_dict(), "experiment": experiment})


# ------------------------------------------------------------------ outputs


def run_sweep(cfg, subset=None, targets=None):
    """Run ``cfg`` and write summary, detail, resolved config and manifest
    into ``cfg.out_dir``.  Returns the report and the output paths."""
    harness = Harness(cfg, subset, targets)
    report = harness.run()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = emit_report(report, out / f"{cfg.experiment}.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "robust_accuracy_convention": DENOMINATOR_NOTE,
        "units": {"epsilon": "fraction of raw pixel range", "linf": "fraction of raw pixel range",
                  "l0": "changed pixel values"},
        "kernel_backend": _kernels.backend_name(),
        "subset_indices": [int(i) for i in harness.subset.indices],
        "models": {
            t.name: {k: t.meta.get(k) for k in ("family", "q", "depth", "width", "m", "dataset", "test_accuracy")}
            for t in harness.targets
        },
        "notes": report.notes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return report, {"summary": summary, "detail": detail_path(summary), "manifest": out / "manifest.json"}


def load_reference():
    text = resources.files("tokenattack").joinpath("resources/imagenet_reference.json").read_text()
    return json.loads(text)


def render_tables(rows, reference=None):
    """Plain-text robust-accuracy tables (percent), one per experiment, with
    the matching ImageNet reference table appended when available."""
    out = []
    by_exp = OrderedDict()
    for r in rows:
        by_exp.setdefault(r["experiment"], []).append(r)
    for exp, rs in by_exp.items():
        out.append(f"== {exp} (desk scale, robust accuracy %) ==")
        models = sorted({r["model"] for r in rs})
        clean = {r["model"]: r["clean_acc"] for r in rs}
        if exp == "sparse_vs_patch":
            out.append(f"{'model':<12}{'clean':>8}{'sparse':>10}{'patch':>10}")
            for m in models:
                vals = {r["q"] == "1": r["robust_acc"] for r in rs if r["model"] == m}
                sp, pa = vals.get(True), vals.get(False)
                out.append(
                    f"{m:<12}{_pct(clean[m]):>8}"
                    f"{_pct(sp) if sp else '-':>10}{_pct(pa) if pa else '-':>10}"
                )
        else:
            col = "q" if exp == "patchsize_sweep" else "K"
            cols = sorted({int(r[col]) for r in rs})
            out.append(f"{'model':<12}{'clean':>8}" + "".join(f"{col}={c}".rjust(9) for c in cols))
            for m in models:
                vals = {int(r[col]): r["robust_acc"] for r in rs if r["model"] == m}
                out.append(
                    f"{m:<12}{_pct(clean[m]):>8}"
                    + "".join(f"{_pct(vals[c]) if c in vals else '-':>9}" for c in cols)
                )
        if reference and exp in reference:
            out.append("")
            out.append(_render_reference(reference[exp]))
        out.append("")
    return "\n".join(out)


def _pct(v):
    return f"{100 * float(v):.2f}"


def _render_reference(table):
    rows = table["rows"]
    cols = list(next(iter(rows.values())).keys())
    fixed = ", ".join(f"{k}={v}" for k, v in table.get("fixed", {}).items())
    head = "-- ImageNet reference" + (f" ({fixed})" if fixed else "") + " --"
    lines = [head, f"{'model':<18}" + "".join(f"{c:>9}" for c in cols)]
    for name, vals in rows.items():
        lines.append(f"{name:<18}" + "".join(f"{vals[c]:>9.2f}" for c in cols))
    return "\n".join(lines)
