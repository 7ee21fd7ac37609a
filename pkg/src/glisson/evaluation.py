"""Staging protocol: class groupings, patient-grouped rotating-fold splits,
metrics, and per-cell experiment reports.
"""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .features import fit_feature_stats, normalize
from .imaging import ParameterError
from .manifest import STAGE_NAMES, Element
from .nn.model import CLASS_COUNTS, MODEL_KINDS, build_model
from .nn.train import TrainConfig, train
from .pipeline import check_mode, input_size

log = logging.getLogger(__name__)

CELL_HEADER = ("model", "mode", "classes", "permutation", "fold", "acc", "mae")
AGGREGATE_HEADER = ("model", "mode", "classes", "acc_mean", "acc_std", "mae_mean", "mae_std")

_GROUPINGS = {
    2: (0, 0, 1, 1, 1),
    3: (0, 1, 1, 2, 2),
    5: (0, 1, 2, 3, 4),
}


class LeakageError(AssertionError):
    """A patient appears in more than one of train/val/test within a fold."""


class ArtifactError(RuntimeError):
    """Inputs a model needs have not been produced yet."""


def group_stage(stage: int, class_count: int) -> int:
    """Map fibrosis stage 0-4 to a class index under a 2/3/5-class grouping."""
    if class_count not in _GROUPINGS:
        raise ParameterError(f"class_count must be one of {CLASS_COUNTS}, got {class_count}")
    if int(stage) != stage or not 0 <= stage <= 4:
        raise ParameterError(f"stage must be an integer 0-4, got {stage}")
    return _GROUPINGS[class_count][int(stage)]


@dataclass(frozen=True)
class ClassScheme:
    class_count: int
    mapping: tuple = field(init=False)

    def __post_init__(self):
        if self.class_count not in _GROUPINGS:
            raise ParameterError(f"class_count must be one of {CLASS_COUNTS}, got {self.class_count}")
        object.__setattr__(self, "mapping", _GROUPINGS[self.class_count])

    def __call__(self, stage: int) -> int:
        return group_stage(stage, self.class_count)

    def labels(self, stages) -> np.ndarray:
        return np.asarray(self.mapping)[np.asarray(stages, dtype=np.int64)]


# splits ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    """Element indices of one (permutation, fold) cell."""

    permutation: int
    fold: int
    folds: int
    seed: int
    train: tuple
    val: tuple
    test: tuple


def _patient_groups(elements: Sequence[Element]):
    groups: dict[str, list[int]] = defaultdict(list)
    stage_of: dict[str, str] = {}
    for i, e in enumerate(elements):
        if stage_of.setdefault(e.patient_id, e.stage) != e.stage:
            raise ParameterError(f"patient {e.patient_id} carries more than one stage label")
        groups[e.patient_id].append(i)
    return groups, stage_of


def make_splits(elements: Sequence[Element], folds: int = 10, permutations: int = 25,
                seed: int = 0) -> list[SplitPlan]:
    """Stage-stratified patient-level rotating folds.

    For each permutation the patients of every stage are shuffled and dealt
    round-robin into ``folds`` folds, continuing the deal across stages so
    fold sizes differ by at most one patient.  Fold ``f`` is the test set,
    fold ``(f + 1) % folds`` the validation set and the rest the training set.
    With two folds there is no room for validation: the other fold trains and
    the validation set is empty.
    """
    if folds < 2:
        raise ParameterError(f"need at least 2 folds, got {folds}")
    if permutations < 1:
        raise ParameterError(f"need at least 1 permutation, got {permutations}")
    groups, stage_of = _patient_groups(elements)
    by_stage: dict[str, list[str]] = defaultdict(list)
    for pid in sorted(groups):
        by_stage[stage_of[pid]].append(pid)
    for stage in STAGE_NAMES:
        n = len(by_stage.get(stage, ()))
        if 0 < n < folds:
            raise ParameterError(f"stage {stage} has {n} patients; {folds}-fold splitting needs at least {folds}")
    if not by_stage:
        raise ParameterError("cannot split an empty manifest")

    plans = []
    for p in range(permutations):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p]))
        assignment: list[list[str]] = [[] for _ in range(folds)]
        k = 0
        for stage in STAGE_NAMES:
            pids = list(by_stage.get(stage, ()))
            for j in rng.permutation(len(pids)):
                assignment[k % folds].append(pids[j])
                k += 1
        members = [sorted(i for pid in fold for i in groups[pid]) for fold in assignment]
        for f in range(folds):
            v = (f + 1) % folds if folds > 2 else None
            train_idx = sorted(i for g in range(folds) if g not in (f, v) for i in members[g])
            val_idx = members[v] if v is not None else []
            plans.append(SplitPlan(permutation=p, fold=f, folds=folds, seed=seed,
                                   train=tuple(train_idx), val=tuple(val_idx), test=tuple(members[f])))
    audit_splits(plans, elements)
    return plans


def audit_splits(plans: Sequence[SplitPlan], elements: Sequence[Element]) -> None:
    """Raise ``LeakageError`` on patient overlap, or when the test folds of a
    complete permutation do not partition the dataset."""
    pid = [e.patient_id for e in elements]
    per_perm: dict[int, list[int]] = defaultdict(list)
    n_folds: dict[int, set] = defaultdict(set)
    for plan in plans:
        sets = [{pid[i] for i in part} for part in (plan.train, plan.val, plan.test)]
        for a in range(3):
            for b in range(a + 1, 3):
                shared = sets[a] & sets[b]
                if shared:
                    raise LeakageError(f"permutation {plan.permutation} fold {plan.fold}: patients "
                                       f"{sorted(shared)[:5]} appear in two partitions")
        per_perm[plan.permutation].extend(plan.test)
        n_folds[plan.permutation].add((plan.fold, plan.folds))
    for p, test in per_perm.items():
        complete = len(n_folds[p]) == next(iter(n_folds[p]))[1]
        if complete and sorted(test) != list(range(len(elements))):
            raise LeakageError(f"permutation {p}: test folds do not partition the dataset")


# metrics ---------------------------------------------------------------

def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ParameterError(f"prediction/truth length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ParameterError("metrics need at least one prediction")
    return pred, truth


def accuracy(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.count_nonzero(pred == truth)) / pred.size


def mae(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.abs(pred - truth).sum()) / pred.size


# experiments -------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolConfig:
    folds: int = 10
    permutations: int = 25
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.folds < 2 or self.permutations < 1:
            raise ParameterError("need folds >= 2 and permutations >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentData:
    """Per-element arrays aligned with ``elements``.

    ``features`` is ``(n, 5)``; ``images`` and ``lines`` are
    ``(n, 1, height, width)`` at the network input size of ``mode``.
    """

    elements: list
    mode: str
    features: Optional[np.ndarray] = None
    images: Optional[np.ndarray] = None
    lines: Optional[np.ndarray] = None

    @property
    def stages(self) -> np.ndarray:
        return np.array([e.stage_index for e in self.elements], dtype=np.int64)

    def require(self, kind: str) -> None:
        need = {"mlnn": ("features",), "cnn": ("images",), "cnnl": ("images", "lines"),
                "concat": ("images", "lines", "features")}[kind]
        producer = {"features": "features", "images": "extract", "lines": "extract"}
        for name in need:
            arr = getattr(self, name)
            if arr is None or len(arr) != len(self.elements):
                raise ArtifactError(f"{kind} needs {name} for every element; run the "
                                    f"'{producer[name]}' stage first")
        if "images" in need:
            expected = input_size(self.mode)
            if tuple(self.images.shape[2:]) != expected:
                raise ArtifactError(f"images are {self.images.shape[2:]}, expected {expected} for mode {self.mode}")


@dataclass(frozen=True)
class CellResult:
    permutation: int
    fold: int
    acc: float
    mae: float


@dataclass
class ExperimentReport:
    """Per-cell results and their aggregate; ``*_std`` is the sample standard
    deviation over all cells."""

    model: str
    mode: str
    class_count: int
    cells: list = field(default_factory=list)

    def __post_init__(self):
        for c in self.cells:
            self._check(c)

    def _check(self, c: CellResult) -> None:
        if not 0.0 <= c.acc <= 1.0:
            raise ValueError(f"accuracy {c.acc} outside [0, 1]")
        if not 0.0 <= c.mae <= self.class_count - 1:
            raise ValueError(f"MAE {c.mae} outside [0, {self.class_count - 1}]")

    def add(self, c: CellResult) -> None:
        self._check(c)
        self.cells.append(c)

    @staticmethod
    def _stats(values) -> tuple[float, float]:
        v = np.asarray(values, dtype=np.float64)
        return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0

    @property
    def acc_mean(self) -> float:
        return self._stats([c.acc for c in self.cells])[0]

    @property
    def acc_std(self) -> float:
        return self._stats([c.acc for c in self.cells])[1]

    @property
    def mae_mean(self) -> float:
        return self._stats([c.mae for c in self.cells])[0]

    @property
    def mae_std(self) -> float:
        return self._stats([c.mae for c in self.cells])[1]

    def cell_rows(self) -> list[tuple]:
        return [(self.model, self.mode, self.class_count, c.permutation, c.fold, c.acc, c.mae)
                for c in self.cells]

    def aggregate_row(self) -> tuple:
        return (self.model, self.mode, self.class_count,
                self.acc_mean, self.acc_std, self.mae_mean, self.mae_std)


def model_inputs(data: ExperimentData, kind: str, idx, feature_stats=None) -> list[np.ndarray]:
    idx = np.asarray(idx, dtype=np.int64)
    feats = None
    if kind in ("mlnn", "concat"):
        feats = data.features[idx]
        if feature_stats is not None:
            feats = normalize(feats, feature_stats)
    if kind == "mlnn":
        return [feats]
    if kind == "cnn":
        return [data.images[idx]]
    stacked = np.concatenate([data.images[idx], data.lines[idx]], axis=1)
    return [stacked] if kind == "cnnl" else [stacked, feats]


def cell_seed(seed: int, permutation: int, fold: int) -> int:
    ss = np.random.SeedSequence([seed, permutation, fold])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def run_cell(data: ExperimentData, kind: str, class_count: int, plan: SplitPlan,
             train_config: TrainConfig, model_options: dict | None = None):
    """Train from scratch on one split and score its test fold.

    Returns ``(CellResult, ModelState)``.
    """
    from dataclasses import replace

    labels = ClassScheme(class_count).labels(data.stages)
    stats = None
    if kind in ("mlnn", "concat"):
        stats = fit_feature_stats(data.features[list(plan.train)])
    opts = dict(model_options or {})
    if kind != "mlnn":
        opts.setdefault("image_size", input_size(data.mode))
    spec = build_model(kind, class_count, **opts)
    cfg = replace(train_config, seed=cell_seed(train_config.seed, plan.permutation, plan.fold))
    state = train(spec, model_inputs(data, kind, plan.train, stats), labels[list(plan.train)],
                  model_inputs(data, kind, plan.val, stats), labels[list(plan.val)], cfg)
    pred = state.net.predict(model_inputs(data, kind, plan.test, stats))
    truth = labels[list(plan.test)]
    return CellResult(plan.permutation, plan.fold, accuracy(pred, truth), mae(pred, truth)), state


def run_experiment(data: ExperimentData, kind: str, class_count: int,
                   protocol: ProtocolConfig | None = None, model_options: dict | None = None,
                   plans: Sequence[SplitPlan] | None = None,
                   progress: Callable[[CellResult], None] | None = None) -> ExperimentReport:
    """Train and test one model per (permutation, fold) cell.

    Cells run serially in (permutation, fold) order, so the report is fully
    determined by the data and configuration.
    """
    protocol = protocol or ProtocolConfig()
    if kind not in MODEL_KINDS:
        raise ParameterError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    if class_count not in CLASS_COUNTS:
        raise ParameterError(f"class_count must be one of {CLASS_COUNTS}, got {class_count}")
    check_mode(data.mode)
    data.require(kind)
    if plans is None:
        plans = make_splits(data.elements, protocol.folds, protocol.permutations, protocol.seed)
    else:
        audit_splits(plans, data.elements)
    report = ExperimentReport(kind, data.mode, class_count)
    for plan in plans:
        result, _ = run_cell(data, kind, class_count, plan, protocol.train, model_options)
        report.add(result)
        log.info("%s/%s/K=%d perm %d fold %d: acc %.4f mae %.4f", kind, data.mode, class_count,
                 plan.permutation, plan.fold, result.acc, result.mae)
        if progress is not None:
            progress(result)
    return report


# report files ------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_cell_csv(reports, dest) -> None:
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CELL_HEADER)
        for r in reports:
            for row in r.cell_rows():
                w.writerow([_fmt(v) for v in row])


def write_aggregate_csv(reports, dest) -> None:
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for r in reports:
            w.writerow([_fmt(v) for v in r.aggregate_row()])


def read_aggregate_csv(src) -> list[dict]:
    with Path(src).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != AGGREGATE_HEADER:
            raise ParameterError(f"{src}: expected header {','.join(AGGREGATE_HEADER)}")
        rows = []
        for rec in reader:
            rec["classes"] = int(rec["classes"])
            for k in AGGREGATE_HEADER[3:]:
                rec[k] = float(rec[k])
            rows.append(rec)
        return rows


def format_table(rows: Sequence[dict]) -> str:
    """Aligned text table, one line per (model, mode, classes) row."""
    head = ["Model", "Mode", "Classes", "Acc (mean ± std)", "MAE (mean ± std)"]
    body = [[r["model"].upper(), r["mode"], str(r["classes"]),
             f"{100 * r['acc_mean']:.2f}% ± {100 * r['acc_std']:.2f}",
             f"{r['mae_mean']:.4f} ± {r['mae_std']:.4f}"]
            for r in sorted(rows, key=lambda r: (r["mode"], r["classes"], MODEL_KINDS.index(r["model"])))]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(x.ljust(wd) for x, wd in zip(row, widths)).rstrip()
             for row in [head, ["-" * wd for wd in widths], *body]]
    return "\n".join(lines)


def plot_accuracy(rows: Sequence[dict], dest) -> None:
    """Bar chart of mean accuracy per model, one panel per (mode, classes)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cells = sorted({(r["mode"], r["classes"]) for r in rows})
    fig, axes = plt.subplots(1, len(cells), figsize=(3.2 * len(cells), 3.0), squeeze=False)
    for ax, (mode, k) in zip(axes[0], cells):
        sel = sorted((r for r in rows if r["mode"] == mode and r["classes"] == k),
                     key=lambda r: MODEL_KINDS.index(r["model"]))
        ax.bar([r["model"] for r in sel], [r["acc_mean"] for r in sel],
               yerr=[r["acc_std"] for r in sel], capsize=3)
        ax.set_ylim(0, 1)
        ax.set_title(f"{mode}, {k} classes")
    axes[0][0].set_ylabel("accuracy")
    fig.tight_layout()
    Path(dest).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(dest, metadata={"Software": None})
    plt.close(fig)
