"""Post-hoc analysis: coefficient export, domain probes and the degradation study.

These functions read domain tags on purpose. They run outside the training
firewall and never feed tags into a loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import tensor as T
from ..data import DomainBatch, concat_batches, read_dataset
from ..dynamic import CoefficientSink, ResidualMode
from ..errors import ConfigError
from ..models import AdaptationModel, load_checkpoint
from ..tensor import Tensor
from .config import TrainConfig
from .training import accuracy, train

EXPORT_BATCH = 256


@dataclass
class CoefficientTable:
    sample_ids: np.ndarray
    domain_tags: np.ndarray          # -1 where the sample had no tag
    values: np.ndarray               # [N, L*K] (+ L*Cout lambda columns when requested)
    columns: List[str]

    def pi_blocks(self, layers: int, K: int) -> np.ndarray:
        """The routing columns reshaped to [N, L, K]."""
        return self.values[:, :layers * K].reshape(-1, layers, K)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "domain_tag", *self.columns])
            for sid, tag, row in zip(self.sample_ids, self.domain_tags, self.values):
                w.writerow([int(sid), "" if tag < 0 else int(tag), *[repr(float(v)) for v in row]])
        return path


def _as_batch(data) -> DomainBatch:
    return data if isinstance(data, DomainBatch) else read_dataset(data)


def _dataset_files(data) -> List:
    if isinstance(data, (str, Path)) and Path(data).is_dir():
        files = sorted(Path(data).glob("*.msd"))
        if not files:
            raise ConfigError(f"no .msd files in {data}")
        return files
    if isinstance(data, (list, tuple)):
        return list(data)
    return [data]


def export_coefficients(checkpoint, datasets, include_lambda: bool = False) -> CoefficientTable:
    """Per-sample concatenated routing coefficients, layer-major.

    ``datasets`` is a batch, a dataset path, a list of those, or a directory of
    ``.msd`` files. Sample ids run consecutively across the inputs.
    """
    model = checkpoint if isinstance(checkpoint, AdaptationModel) else load_checkpoint(checkpoint)
    mode = model.arch.mode
    if not mode.routes and not (include_lambda and mode.attends):
        raise ConfigError(f"mode {mode.value} has no routing coefficients to export")
    batch = concat_batches([_as_batch(d) for d in _dataset_files(datasets)], keep_tags=True)
    tags = batch.domain_tag if batch.has_tags else None

    sink = CoefficientSink()
    model.attach_sink(sink)
    try:
        with T.no_grad():
            for s in range(0, len(batch), EXPORT_BATCH):
                sl = slice(s, s + EXPORT_BATCH)
                sink.sample_ids = np.arange(len(batch))[sl]
                sink.domain_tags = None if tags is None else tags[sl]
                model.features(Tensor(batch.images[sl]))
    finally:
        model.attach_sink(None)

    L, K, n = len(model.g), model.arch.K, len(batch)
    pi = np.zeros((n, L, K)) if mode.routes else None
    lam = [np.zeros((n, layer.cout)) for layer in model.g] if include_lambda and mode.attends else None
    for rec in sink.records:
        if pi is not None:
            pi[rec.sample_id, rec.layer_index] = rec.pi
        if lam is not None:
            lam[rec.layer_index][rec.sample_id] = rec.lam

    blocks, columns = [], []
    if pi is not None:
        blocks.append(pi.reshape(n, L * K))
        columns += [f"pi_{l}_{k}" for l in range(L) for k in range(K)]
    if lam is not None:
        for l, arr in enumerate(lam):
            blocks.append(arr)
            columns += [f"lambda_{l}_{c}" for c in range(arr.shape[1])]
    tag_col = np.full(n, -1, dtype=np.int64) if tags is None else tags.astype(np.int64)
    return CoefficientTable(np.arange(n), tag_col, np.concatenate(blocks, axis=1), columns)


def nearest_centroid_probe(features: np.ndarray, labels: np.ndarray, eval_fraction: float = 0.5,
                           seed: int = 0) -> float:
    """Fit class centroids on a random split and score nearest-centroid accuracy on the rest."""
    features, labels = np.asarray(features, dtype=np.float64), np.asarray(labels)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(labels))
    n_eval = int(round(len(labels) * eval_fraction))
    ev, fit = perm[:n_eval], perm[n_eval:]
    classes = np.unique(labels[fit])
    centroids = np.stack([features[fit][labels[fit] == c].mean(axis=0) for c in classes])
    d = ((features[ev][:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(classes[np.argmin(d, axis=1)] == labels[ev]))


# ---------------------------------------------------------------------------
# degradation study
# ---------------------------------------------------------------------------

@dataclass
class DegradationReport:
    domains: List[str]
    oracle_acc: List[float]
    static_acc: List[float]
    dynamic_acc: List[float]
    dynamic_mode: str = ResidualMode.SUBSPACE_ROUTING.value
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def static_gap(self) -> List[float]:
        return [o - s for o, s in zip(self.oracle_acc, self.static_acc)]

    @property
    def dynamic_gap(self) -> List[float]:
        return [o - d for o, d in zip(self.oracle_acc, self.dynamic_acc)]

    @property
    def mean_static_gap(self) -> float:
        return float(np.mean(self.static_gap))

    @property
    def mean_dynamic_gap(self) -> float:
        return float(np.mean(self.dynamic_gap))

    def rows(self) -> List[list]:
        out = [["domain", "oracle_acc", "static_acc", "dynamic_acc", "static_gap", "dynamic_gap"]]
        for i, name in enumerate(self.domains):
            out.append([name, *[repr(float(v)) for v in (
                self.oracle_acc[i], self.static_acc[i], self.dynamic_acc[i],
                self.static_gap[i], self.dynamic_gap[i])]])
        out.append(["mean", *[repr(float(np.mean(v))) for v in (
            self.oracle_acc, self.static_acc, self.dynamic_acc, self.static_gap, self.dynamic_gap)]])
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.rows())
        return path


def _domain_names(cfg: TrainConfig) -> List[str]:
    return [Path(p).stem.removesuffix("_train") for p in cfg.source_paths]


def degradation_study(cfg: TrainConfig, out_dir=None,
                      static_model: Optional[AdaptationModel] = None,
                      dynamic_model: Optional[AdaptationModel] = None,
                      oracles: Optional[Sequence[AdaptationModel]] = None) -> DegradationReport:
    """Per-source accuracy of single-domain oracles vs. the multi-source static and dynamic models.

    Each oracle is a Static model trained with the same recipe on one source
    domain alone (``cfg.target_path`` still supplies the unlabelled target).
    Already-trained models may be passed in to skip their training.
    """
    cfg.validate()
    if cfg.mode == ResidualMode.STATIC:
        raise ConfigError("degradation study needs a dynamic mode in the config")
    eval_paths = cfg.source_eval_paths or cfg.source_paths
    evals = [read_dataset(p) for p in eval_paths]
    out_dir = Path(out_dir) if out_dir is not None else None

    def sub(name):
        return None if out_dir is None else out_dir / name

    if oracles is None:
        oracles = [train(cfg.replace(mode=ResidualMode.STATIC, source_paths=[src],
                                     source_eval_paths=[ev]), out_dir=sub(f"oracle_{i}")).model
                   for i, (src, ev) in enumerate(zip(cfg.source_paths, eval_paths))]
    if static_model is None:
        static_model = train(cfg.replace(mode=ResidualMode.STATIC), out_dir=sub("static")).model
    if dynamic_model is None:
        dynamic_model = train(cfg, out_dir=sub("dynamic")).model

    report = DegradationReport(
        domains=_domain_names(cfg),
        oracle_acc=[accuracy(m, b) for m, b in zip(oracles, evals)],
        static_acc=[accuracy(static_model, b) for b in evals],
        dynamic_acc=[accuracy(dynamic_model, b) for b in evals],
        dynamic_mode=cfg.mode.value,
    )
    if out_dir is not None:
        report.write_csv(out_dir / "degradation.csv")
    return report
