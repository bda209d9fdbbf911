"""Prototype training: batch sampling, transport assignment, EMA update.

One pass over a batch does, for every scale and every alpha bank: build the
normalized cost matrix, solve entropic OT against the bank, then blend each
prototype toward the plan-weighted barycenter of the batch features:

    p_i  <-  eta * p_i + (1 - eta) * N_p * sum_k T[k, i] * z_k

Because column masses are uniform, ``N_p * sum_k T[k, i]`` is 1 at
convergence and the second term is a convex combination of batch features —
every prototype receives mass every batch, so none can die.

Banks are independent; batches within one bank are strictly sequential
(the EMA is order-dependent). The same shuffled batch order drives every
bank, so a single seeded generator reproduces a full run bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    STORAGE_DTYPE,
    CostConfig,
    FeatureGrid,
    PrototypeSet,
    TrainConfig,
    TransportPlan,
    init_prototypes,
)
from .cost import cost_matrix
from .errors import (
    ConfigError,
    DimMismatchError,
    EmptyDatasetError,
    NonFiniteError,
    ValidationError,
)
from .sinkhorn import SolverParams, solve, transport_cost
from . import formats

Dataset = Mapping[int, Sequence[FeatureGrid]]
AugmentHook = Callable[[Sequence[FeatureGrid], int, np.random.Generator], Sequence[FeatureGrid]]


def rng_state_to_bytes(rng: np.random.Generator) -> bytes:
    """Serialize a generator's state so a run can resume bit-exactly."""
    return json.dumps(rng.bit_generator.state, sort_keys=True, separators=(",", ":")).encode()


def rng_from_state_bytes(blob: bytes) -> np.random.Generator:
    state = json.loads(blob.decode())
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


@dataclass
class TrainState:
    """Everything needed to continue (or score from) a training run."""

    banks: dict[int, list[PrototypeSet]]  # scale_id -> banks ordered by alpha
    epoch: int
    batches_done: int
    rng: np.random.Generator
    history: dict[tuple[int, float], list[dict]] = field(default_factory=dict)

    def all_banks(self) -> list[PrototypeSet]:
        return [b for scale in sorted(self.banks) for b in self.banks[scale]]


def ema_update(
    protos: PrototypeSet,
    plan: TransportPlan,
    batch_features: np.ndarray,
    eta: float,
) -> PrototypeSet:
    """In-place EMA blend of prototype weights toward their assigned features."""
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"eta must be in [0, 1], got {eta}")
    z = np.asarray(batch_features, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != protos.dim:
        raise DimMismatchError(f"batch features must be (rows, {protos.dim})")
    if plan.cols != protos.total or plan.rows != z.shape[0]:
        raise DimMismatchError(
            f"plan shape {(plan.rows, plan.cols)} does not couple "
            f"{z.shape[0]} features to {protos.total} prototypes"
        )
    if eta == 1.0:
        return protos  # degenerate EMA: bit-identical weights
    barycenter = protos.total * (plan.matrix.T @ z)
    updated = eta * protos.weights.astype(np.float64) + (1.0 - eta) * barycenter
    if not np.isfinite(updated).all():
        raise NonFiniteError("prototype update produced NaN or Inf")
    protos.weights[:] = updated.astype(STORAGE_DTYPE)
    return protos


def _normalize_dataset(dataset: Dataset | Sequence[FeatureGrid]) -> dict[int, list[FeatureGrid]]:
    if isinstance(dataset, Mapping):
        by_scale = {int(s): list(grids) for s, grids in dataset.items()}
    else:
        grids = list(dataset)
        if not grids:
            raise EmptyDatasetError("dataset is empty")
        by_scale = {grids[0].scale_id: grids}
    if not by_scale or any(len(g) == 0 for g in by_scale.values()):
        raise EmptyDatasetError("dataset is empty")
    sizes = {len(g) for g in by_scale.values()}
    if len(sizes) != 1:
        raise DimMismatchError(f"scales disagree on sample count: {sorted(sizes)}")
    for scale, grids in by_scale.items():
        dims = {(g.height, g.width, g.dim) for g in grids}
        if len(dims) != 1:
            raise DimMismatchError(f"scale {scale} mixes grid shapes: {sorted(dims)}")
    return by_scale


def _init_state(
    by_scale: dict[int, list[FeatureGrid]],
    cfg: TrainConfig,
    alphas: Sequence[float],
) -> TrainState:
    rng = np.random.default_rng(cfg.rng_seed)
    banks: dict[int, list[PrototypeSet]] = {}
    for scale in sorted(by_scale):
        g0 = by_scale[scale][0]
        banks[scale] = [
            init_prototypes(
                cfg.n, g0.height, g0.width, g0.dim, alpha,
                seed=rng, mean=cfg.init_mean, std=cfg.init_std, scale_id=scale,
            )
            for alpha in alphas
        ]
    return TrainState(banks=banks, epoch=0, batches_done=0, rng=rng)


def save_state(state: TrainState, cfg: TrainConfig, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = rng_state_to_bytes(state.rng)
    paths = []
    for scale in sorted(state.banks):
        for protos in state.banks[scale]:
            path = directory / f"bank_s{scale}_a{protos.alpha:g}.prdt"
            formats.write_prdt(
                path, protos, eta=cfg.eta, epsilon=cfg.epsilon,
                epoch=state.epoch, rng_blob=blob,
            )
            paths.append(path)
    return paths


def load_state(directory: str | Path) -> TrainState:
    directory = Path(directory)
    files = sorted(directory.glob("*.prdt"))
    if not files:
        raise ConfigError(f"no checkpoints found in {directory}")
    banks: dict[int, list[PrototypeSet]] = {}
    epochs = set()
    blobs = set()
    for path in files:
        protos, meta = formats.read_prdt(path)
        banks.setdefault(protos.scale_id, []).append(protos)
        epochs.add(meta["epoch"])
        blobs.add(meta["rng_blob"])
    if len(epochs) != 1 or len(blobs) != 1:
        raise ConfigError(f"checkpoints in {directory} belong to different epochs or runs")
    for scale in banks:
        banks[scale].sort(key=lambda b: b.alpha)
    return TrainState(
        banks=banks,
        epoch=epochs.pop(),
        batches_done=0,
        rng=rng_from_state_bytes(blobs.pop()),
    )


def train(
    dataset: Dataset | Sequence[FeatureGrid],
    cfg: TrainConfig,
    *,
    alphas: Sequence[float] | None = None,
    solver: SolverParams | None = None,
    clamp_zero_features: bool = False,
    augment: AugmentHook | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    early_stop_tol: float | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run the full prototype-learning loop and return the final state.

    ``dataset`` maps scale_id to one FeatureGrid per sample (same sample
    order across scales); a bare sequence is treated as a single scale.
    Per scale one bank is trained per entry of ``alphas`` (default: 0 for
    the global bank plus ``cfg.alpha_local`` for the local one). The final
    partial batch of an epoch is dropped when smaller than ``cfg.n``.

    ``early_stop_tol``, when set, stops after an epoch whose mean transport
    cost improved by less than ``early_stop_tol`` relative to the previous
    epoch (off by default). ``on_epoch`` receives one diagnostic dict per
    (epoch, scale, alpha).
    """
    by_scale = _normalize_dataset(dataset)
    if cfg.batch_size < cfg.n:
        raise ValidationError(
            f"batch_size ({cfg.batch_size}) must be >= n ({cfg.n})"
        )
    alphas = list(alphas) if alphas is not None else [0.0, cfg.alpha_local]
    if not alphas:
        raise ValidationError("at least one alpha bank is required")
    solver = solver or SolverParams(epsilon=cfg.epsilon, max_iters=cfg.max_sinkhorn_iters)

    if resume and checkpoint_dir and any(Path(checkpoint_dir).glob("*.prdt")):
        state = load_state(checkpoint_dir)
        got = sorted({b.alpha for banks in state.banks.values() for b in banks})
        want = sorted(float(np.float32(a)) for a in alphas)
        if got != want or sorted(state.banks) != sorted(by_scale):
            raise ConfigError("checkpoint banks do not match the requested configuration")
    else:
        state = _init_state(by_scale, cfg, alphas)

    n_samples = len(next(iter(by_scale.values())))
    prev_cost: float | None = None

    for _ in range(state.epoch, cfg.epochs):
        order = state.rng.permutation(n_samples)
        epoch_stats = {
            (scale, b.alpha): {"cost": 0.0, "converged": 0, "batches": 0}
            for scale, banks in state.banks.items()
            for b in banks
        }
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < cfg.n:
                continue  # a batch smaller than n cannot feed n prototypes per cell
            for scale in sorted(state.banks):
                grids = [by_scale[scale][i] for i in idx]
                if augment is not None:
                    grids = list(augment(grids, scale, state.rng))
                feats = np.concatenate([g.features_flat for g in grids], axis=0)
                for protos in state.banks[scale]:
                    ccfg = CostConfig(alpha=protos.alpha, clamp_zero_features=clamp_zero_features)
                    m = cost_matrix(grids, protos, ccfg)
                    plan = solve(m, solver)
                    ema_update(protos, plan, feats, cfg.eta)
                    stats = epoch_stats[(scale, protos.alpha)]
                    stats["cost"] += transport_cost(m, plan)
                    stats["converged"] += int(plan.converged)
                    stats["batches"] += 1
            state.batches_done += 1
        state.epoch += 1

        epoch_costs = []
        for key, stats in sorted(epoch_stats.items()):
            batches = max(stats["batches"], 1)
            record = {
                "epoch": state.epoch,
                "scale": key[0],
                "alpha": key[1],
                "mean_cost": stats["cost"] / batches,
                "converged_frac": stats["converged"] / batches,
            }
            state.history.setdefault(key, []).append(record)
            epoch_costs.append(record["mean_cost"])
            if on_epoch is not None:
                on_epoch(record)
        if checkpoint_dir is not None:
            save_state(state, cfg, checkpoint_dir)

        mean_cost = float(np.mean(epoch_costs)) if epoch_costs else 0.0
        if early_stop_tol is not None and prev_cost is not None:
            if abs(prev_cost - mean_cost) <= early_stop_tol * max(abs(prev_cost), 1e-12):
                break
        prev_cost = mean_cost

    return state
