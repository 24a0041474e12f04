"""Training, evaluation and self-training loops.

Sources are concatenated and shuffled without their domain identity; the
whole of :func:`train` runs inside a domain-tag firewall and fails if any tag
is read.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .. import tensor as T
from ..data import DomainBatch, concat_batches, domain_tag_firewall, read_dataset
from ..errors import ContractError, DataError, DivergenceError, NumericError
from ..losses import Alignment, classifier_discrepancy, cross_entropy, moment_distance, one_hot
from ..models import AdaptationModel, load_checkpoint, save_checkpoint
from ..tensor import Tensor
from .config import TrainConfig

log = logging.getLogger(__name__)

EVAL_BATCH = 256


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr0 * decay_factor ** (epoch // decay_every)``."""
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def sgd_update(params, lr: float) -> None:
    for p in params:
        p.data -= lr * p.grad
        p.grad.fill(0.0)


@dataclass
class MetricsRow:
    epoch: int
    lce: float
    ld: float
    target_acc: float
    per_source_acc: List[float]
    lr: float
    wall_ms: int

    def as_list(self) -> list:
        return [self.epoch, _fmt(self.lce), _fmt(self.ld), _fmt(self.target_acc),
                *[_fmt(a) for a in self.per_source_acc], _fmt(self.lr), self.wall_ms]


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_header(n_sources: int) -> list:
    return ["epoch", "lce", "ld", "target_acc", *[f"src_acc_{i}" for i in range(n_sources)], "lr", "wall_ms"]


def next_free_path(path: Path) -> Path:
    """``path`` if unused, else ``stem-1.suffix``, ``stem-2.suffix``, ..."""
    if not path.exists():
        return path
    i = 1
    while True:
        cand = path.with_name(f"{path.stem}-{i}{path.suffix}")
        if not cand.exists():
            return cand
        i += 1


# ---------------------------------------------------------------------------
# single optimisation steps
# ---------------------------------------------------------------------------

def _source_ce(model: AdaptationModel, feats: Tensor, y: Tensor) -> Tensor:
    p1, p2 = model.head_probs(feats)
    return T.add(cross_entropy(p1, y), cross_entropy(p2, y))


def _check(value: float, phase: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss in {phase}")
    return value


def mcd_phase_a(model: AdaptationModel, xs: Tensor, ys: Tensor, lr: float) -> float:
    """Update g, f1, f2 on the source cross-entropy of both heads."""
    loss = _source_ce(model, model.features(xs), ys)
    value = _check(loss.item(), "phase A")
    T.backward(loss)
    sgd_update(model.parameters(), lr)
    return value


def mcd_phase_b(model: AdaptationModel, xs: Tensor, ys: Tensor, xt: Tensor, lam: float, lr: float) -> float:
    """Update f1, f2 only on CE(source) - lam * discrepancy(target); returns the CE term."""
    with T.no_grad():
        fs, ft = model.features(xs), model.features(xt)
    lce = _source_ce(model, fs, ys)
    disc = classifier_discrepancy(*model.head_probs(ft))
    loss = T.sub(lce, T.scale(disc, lam))
    _check(loss.item(), "phase B")
    T.backward(loss)
    sgd_update(model.head_parameters(), lr)
    return lce.item()


def mcd_phase_c(model: AdaptationModel, xt: Tensor, lam: float, steps: int, lr: float) -> float:
    """Update g only, ``steps`` times, on lam * discrepancy(target); returns the last discrepancy."""
    ld_value = 0.0
    for _ in range(steps):
        if lam == 0:
            with T.no_grad():
                return classifier_discrepancy(*model.predict(xt)).item()
        disc = classifier_discrepancy(*model.predict(xt))
        ld_value = _check(disc.item(), "phase C")
        T.backward(T.scale(disc, lam))
        sgd_update(model.g_parameters(), lr)
        model.zero_grad()
    return ld_value


def mcd_step(model: AdaptationModel, xs: Tensor, ys: Tensor, xt: Tensor,
             cfg: TrainConfig, lr: float) -> Tuple[float, float]:
    """One classifier-discrepancy step; returns (source CE of phase B, last phase-C discrepancy).

    A: update g, f1, f2 on source cross-entropy (both heads).
    B: update f1, f2 on CE(source) - lambda * discrepancy(target), g frozen.
    C: update g only, ``mcd_inner_steps`` times, on lambda * discrepancy(target).
    """
    mcd_phase_a(model, xs, ys, lr)
    lce = mcd_phase_b(model, xs, ys, xt, cfg.lam, lr)
    ld = mcd_phase_c(model, xt, cfg.lam, cfg.mcd_inner_steps, lr)
    return lce, ld


def moment_step(model, xs, ys, xt, cfg, lr) -> Tuple[float, float]:
    fs, ft = model.features(xs), model.features(xt)
    lce = _source_ce(model, fs, ys)
    ld = moment_distance(fs, ft)
    loss = T.add(lce, T.scale(ld, cfg.lam))
    _check(loss.item(), "moment step")
    T.backward(loss)
    sgd_update(model.parameters(), lr)
    return lce.item(), ld.item()


def source_only_step(model, xs, ys, xt, cfg, lr) -> Tuple[float, float]:
    lce = _source_ce(model, model.features(xs), ys)
    _check(lce.item(), "source step")
    T.backward(lce)
    sgd_update(model.parameters(), lr)
    with T.no_grad():
        ld = classifier_discrepancy(*model.predict(xt)).item()
    return lce.item(), ld


_STEPS = {Alignment.MCD: mcd_step, Alignment.MOMENT: moment_step, Alignment.NONE: source_only_step}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def ensemble_probs(model: AdaptationModel, images: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, images.shape[0], batch):
            out.append(model.predict_ensemble(Tensor(images[s:s + batch])).data)
    return np.concatenate(out) if out else np.zeros((0, model.arch.classes))


def accuracy(model: AdaptationModel, batch: DomainBatch) -> float:
    """Ensemble argmax accuracy; ties go to the lowest class index."""
    if batch.labels is None:
        raise DataError("cannot evaluate on a dataset without labels")
    pred = np.argmax(ensemble_probs(model, batch.images), axis=1)
    return float(np.mean(pred == batch.labels))


def evaluate(checkpoint, dataset) -> float:
    """Accuracy of a model (or checkpoint path) on a batch (or dataset path)."""
    model = checkpoint if isinstance(checkpoint, AdaptationModel) else load_checkpoint(checkpoint)
    batch = dataset if isinstance(dataset, DomainBatch) else read_dataset(dataset)
    return accuracy(model, batch)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: AdaptationModel
    history: List[MetricsRow]
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None
    tag_reads: int = 0


@dataclass
class _Datasets:
    source: DomainBatch
    target: DomainBatch
    target_eval: DomainBatch
    source_evals: List[DomainBatch] = field(default_factory=list)
    classes: int = 0


def _load(cfg: TrainConfig, extra_source: Optional[DomainBatch]) -> _Datasets:
    if not cfg.source_paths or not cfg.target_path:
        raise DataError("source_paths and target_path are required")
    sources = [read_dataset(p) for p in cfg.source_paths]
    if any(s.labels is None for s in sources):
        raise DataError("source datasets must be labelled")
    pool = list(sources) + ([extra_source] if extra_source is not None else [])
    source = concat_batches(pool, keep_tags=False)
    target_file = read_dataset(cfg.target_path)
    target_eval = read_dataset(cfg.target_eval_path) if cfg.target_eval_path else target_file
    if cfg.source_eval_paths:
        source_evals = [read_dataset(p) for p in cfg.source_eval_paths]
    else:
        source_evals = sources
    classes = cfg.classes or int(source.labels.max()) + 1
    return _Datasets(source=source, target=target_file.without_labels().without_tags(),
                     target_eval=target_eval, source_evals=source_evals, classes=classes)


def train(cfg: TrainConfig, out_dir=None, init_model: Optional[AdaptationModel] = None,
          extra_source: Optional[DomainBatch] = None,
          datasets: Optional[_Datasets] = None) -> TrainResult:
    """Run the configured schedule and (optionally) write metrics + checkpoint.

    ``init_model`` warm-starts from existing weights; ``extra_source`` adds
    labelled samples (e.g. pseudo-labelled target data) to the source pool.
    """
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    with domain_tag_firewall() as reads:
        ds = datasets or _load(cfg, extra_source)
        model = init_model.copy() if init_model is not None else AdaptationModel(cfg.architecture(ds.classes), cfg.seed)
        if model.arch.classes != ds.classes:
            raise DataError(f"model has {model.arch.classes} classes, data has {ds.classes}")
        history = _run(cfg, model, ds, out_dir)
        n_reads = reads()
    if n_reads:
        raise ContractError(f"domain tags were read {n_reads} times during training")
    result = TrainResult(model=model, history=history, tag_reads=n_reads)
    if out_dir is not None:
        result.metrics_path = _write_metrics(out_dir, history, len(ds.source_evals))
        result.checkpoint_path = save_checkpoint(model, next_free_path(out_dir / "model.drtm"))
    return result


def _run(cfg: TrainConfig, model: AdaptationModel, ds: _Datasets, out_dir) -> List[MetricsRow]:
    step = _STEPS[cfg.alignment]
    rng = np.random.default_rng([int(cfg.seed), 99])
    ns, nt = len(ds.source), len(ds.target)
    y_all = ds.source.labels
    history = []
    t_perm, t_pos = rng.permutation(nt), 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, cfg)
        perm = rng.permutation(ns)
        lces, lds = [], []
        for s in range(0, ns, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            if t_pos + len(idx) > nt:
                t_perm, t_pos = rng.permutation(nt), 0
            tidx = t_perm[t_pos:t_pos + min(len(idx), nt)]
            t_pos += len(tidx)
            xs = Tensor(ds.source.images[idx])
            ys = one_hot(y_all[idx], ds.classes)
            xt = Tensor(ds.target.images[tidx])
            try:
                lce, ld = step(model, xs, ys, xt, cfg, lr)
            except NumericError as exc:
                diag = {"epoch": epoch, "batch_start": int(s), "lr": lr, "error": str(exc),
                        "config": cfg.to_dict()}
                if out_dir is not None:
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    (Path(out_dir) / "divergence.json").write_text(json.dumps(diag, indent=2))
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", diag) from exc
            lces.append(lce)
            lds.append(ld)
        last = epoch == cfg.epochs - 1
        if (epoch + 1) % cfg.eval_every == 0 or last:
            row = MetricsRow(
                epoch=epoch,
                lce=float(np.mean(lces)) if lces else 0.0,
                ld=float(np.mean(lds)) if lds else 0.0,
                target_acc=accuracy(model, ds.target_eval),
                per_source_acc=[accuracy(model, b) for b in ds.source_evals],
                lr=lr,
                wall_ms=int(round((time.perf_counter() - start) * 1000)) if cfg.record_wall_ms else 0,
            )
            history.append(row)
            log.info("epoch %d lce=%.4f ld=%.4f target_acc=%.4f", epoch, row.lce, row.ld, row.target_acc)
    return history


def _write_metrics(out_dir: Path, history: Sequence[MetricsRow], n_sources: int) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = next_free_path(out_dir / "metrics.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(n_sources))
        for row in history:
            w.writerow(row.as_list())
    return path


# ---------------------------------------------------------------------------
# self-training
# ---------------------------------------------------------------------------

def select_pseudo_labels(probs: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Indices whose max probability is strictly above ``threshold``, with their argmax labels."""
    probs = np.asarray(probs)
    conf = probs.max(axis=1)
    idx = np.flatnonzero(conf > threshold)
    return idx, np.argmax(probs[idx], axis=1) if idx.size else np.zeros(0, dtype=np.int64)


def self_train(checkpoint, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Pseudo-label confident target samples and retrain on source + those samples.

    Training warm-starts from ``checkpoint`` and repeats the configured recipe.
    If no target sample clears ``cfg.st_threshold`` the input model is returned
    unchanged (with a warning).
    """
    model = checkpoint if isinstance(checkpoint, AdaptationModel) else load_checkpoint(checkpoint)
    target = read_dataset(cfg.target_path).without_labels().without_tags()
    probs = ensemble_probs(model, target.images)
    idx, labels = select_pseudo_labels(probs, cfg.st_threshold)
    if idx.size == 0:
        log.warning("no target sample exceeds confidence %.3f; model unchanged", cfg.st_threshold)
        path = None if isinstance(checkpoint, AdaptationModel) else Path(checkpoint)
        return TrainResult(model=model, history=[], checkpoint_path=path)
    pseudo = DomainBatch(target.images[idx], labels)
    log.info("self-training with %d pseudo-labelled target samples", idx.size)
    return train(cfg, out_dir=out_dir, init_model=model, extra_source=pseudo)
