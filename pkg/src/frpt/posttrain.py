"""Orchestration: precompute reconstruction targets, run post-training
sweeps over trainable layer ranges, report accuracies, export deviations.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigMismatch, ReconstructionError, ShapeMismatch
from .network import AdamState, evaluate, forward_trace, train_step
from .reconstruct import ReconDataset, reconstruct_chain

__all__ = [
    "PostTrainConfig",
    "SweepEntry",
    "SweepReport",
    "pretrain",
    "build_recon_dataset",
    "run_posttrain",
    "deviation_heatmap",
]


@dataclass(frozen=True)
class PostTrainConfig:
    """One post-training configuration.

    ``mode`` selects plain continued backprop ("bp", classification loss
    only) or reconstruction-augmented training ("fr").  Units in
    ``(l_s, l_r]`` are trainable; everything else stays frozen.
    """

    mode: str
    l_s: int
    l_r: int
    alpha: float = 0.1
    epochs: int = 10
    batch_size: int = 256
    lr: float = 0.001
    seeds: tuple = (0,)
    embed_method: str = "ne"
    record_epochs: tuple = (1, 5, 10)

    def __post_init__(self):
        if self.mode not in ("fr", "bp"):
            raise ValueError(f"mode must be 'fr' or 'bp', got {self.mode!r}")
        if not 0 <= self.l_s < self.l_r:
            raise ValueError(f"need 0 <= l_s < l_r, got ({self.l_s}, {self.l_r})")
        if self.mode == "fr":
            if not 0.0 < self.alpha <= 1.0:
                raise ValueError("fr mode needs alpha in (0, 1]")
            if self.embed_method not in ("ma", "ne", "onehot"):
                raise ValueError(f"unknown embedding method {self.embed_method!r}")

    @property
    def effective_alpha(self):
        return self.alpha if self.mode == "fr" else 0.0

    @property
    def rec_loss(self):
        # The L1-optimal embedding pairs with an L1 reconstruction loss.
        return "l1" if self.embed_method == "ma" else "mse"


@dataclass
class SweepEntry:
    """Per-seed accuracies of one configuration at the recorded epochs."""

    mode: str
    embed: str
    l_s: int
    l_r: int
    params: int
    accuracies: dict = field(default_factory=dict)  # seed -> {epoch: acc}

    def epochs_recorded(self):
        epochs = set()
        for per_epoch in self.accuracies.values():
            epochs.update(per_epoch)
        return sorted(epochs)

    def mean_std(self, epoch):
        values = [acc[epoch] for acc in self.accuracies.values() if epoch in acc]
        return float(np.mean(values)), float(np.std(values))


class SweepReport:
    """Collection of sweep entries with CSV export.

    Row schema: mode,l_S,l_R,params,seed,epoch,accuracy,embed.  The
    aggregate file replaces seed/accuracy with mean and std columns.
    """

    RAW_HEADER = ["mode", "l_S", "l_R", "params", "seed", "epoch", "accuracy", "embed"]
    AGG_HEADER = ["mode", "l_S", "l_R", "params", "epoch", "mean", "std", "embed"]

    def __init__(self, entries=None):
        self.entries = list(entries) if entries else []

    def add(self, entry):
        self.entries.append(entry)

    def raw_rows(self):
        for e in self.entries:
            for seed in sorted(e.accuracies):
                for epoch in sorted(e.accuracies[seed]):
                    yield [e.mode, e.l_s, e.l_r, e.params, seed, epoch,
                           f"{e.accuracies[seed][epoch]:.6f}", e.embed]

    def aggregate_rows(self):
        for e in self.entries:
            for epoch in e.epochs_recorded():
                mean, std = e.mean_std(epoch)
                yield [e.mode, e.l_s, e.l_r, e.params, epoch,
                       f"{mean:.6f}", f"{std:.6f}", e.embed]

    def _render(self, header, rows):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()

    def render_raw(self):
        return self._render(self.RAW_HEADER, self.raw_rows())

    def render_aggregate(self):
        return self._render(self.AGG_HEADER, self.aggregate_rows())


def pretrain(net, train, test=None, epochs=10, batch_size=256, lr=0.001, seed=0,
             epoch_callback=None):
    """Plain end-to-end training of all units; mutates ``net`` in place.

    Returns per-epoch test accuracies (empty when no test set is given).
    ``epoch_callback(epoch, net, accuracy)`` fires after every epoch.
    """
    adam = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    n = len(train)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            train_step(net, adam, train.images[idx], train.labels[idx])
        accuracy = evaluate(net, test) if test is not None else None
        if accuracy is not None:
            history.append(accuracy)
        if epoch_callback is not None:
            epoch_callback(epoch, net, accuracy)
    return history


def build_recon_dataset(net, dataset, l_r, method="ne", batch_size=256,
                        source_digest=""):
    """Reconstruct the unit-``l_r`` target feature for every instance.

    Returns ``(ReconDataset, diagnostics)`` where diagnostics maps each
    reconstructed unit to the mean over batches of its worst
    forward-consistency violation.  Deterministic given the network and
    the dataset order.
    """
    n = len(dataset)
    chunks = []
    consistency = {}
    batches = 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        trace = forward_trace(net, dataset.images[start:stop])
        try:
            recon = reconstruct_chain(net, trace, dataset.labels[start:stop], l_r,
                                      method=method)
        except ReconstructionError as exc:
            raise ReconstructionError(exc.unit, exc.cause,
                                      instance_range=(start, stop - 1)) from exc
        chunks.append(recon.target)
        for l, value in recon.consistency.items():
            consistency[l] = consistency.get(l, 0.0) + value
        batches += 1
    diagnostics = {l: total / batches for l, total in sorted(consistency.items())}
    targets = np.concatenate(chunks, axis=0)
    return ReconDataset(targets=targets, l_r=l_r, method=method,
                        source_digest=source_digest), diagnostics


def run_posttrain(net, config, train, test=None, recon=None, epoch_callback=None):
    """Run one post-training configuration across its seeds.

    The supplied network is the frozen starting point; each seed trains an
    independent copy.  Returns ``(SweepEntry, models)`` with the trained
    network per seed.  FR mode requires a ReconDataset built at the same
    ``l_r`` (ConfigMismatch otherwise).

    ``epoch_callback(seed, epoch, model, accuracy)`` fires at every
    recorded epoch, e.g. to snapshot checkpoints alongside the accuracy
    table.
    """
    depth = net.depth
    if config.l_r > depth:
        raise ValueError(f"l_r {config.l_r} exceeds network depth {depth}")
    alpha = config.effective_alpha
    targets = None
    if config.mode == "fr":
        if recon is None:
            raise ConfigMismatch("fr mode requires a reconstruction dataset")
        if recon.l_r != config.l_r:
            raise ConfigMismatch(
                f"reconstruction dataset built at l_r={recon.l_r}, config wants {config.l_r}"
            )
        if len(recon) != len(train):
            raise ConfigMismatch(
                f"{len(recon)} reconstruction targets for {len(train)} instances"
            )
        targets = recon.targets
    record = {e for e in config.record_epochs if e <= config.epochs} | {config.epochs}

    entry = SweepEntry(
        mode=config.mode,
        embed=config.embed_method if config.mode == "fr" else "",
        l_s=config.l_s,
        l_r=config.l_r,
        params=net.trainable_param_count(config.l_s, config.l_r),
    )
    models = {}
    n = len(train)
    for seed in config.seeds:
        model = net.copy()
        adam = AdamState(lr=config.lr)
        rng = np.random.default_rng(seed)
        per_epoch = {}
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch_targets = targets[idx] if targets is not None else None
                train_step(model, adam, train.images[idx], train.labels[idx],
                           recon_targets=batch_targets, alpha=alpha,
                           train_range=(config.l_s, config.l_r),
                           rec_loss=config.rec_loss)
            if epoch in record:
                accuracy = evaluate(model, test) if test is not None else None
                if accuracy is not None:
                    per_epoch[epoch] = accuracy
                if epoch_callback is not None:
                    epoch_callback(seed, epoch, model, accuracy)
        entry.accuracies[seed] = per_epoch
        models[seed] = model
    return entry, models


def deviation_heatmap(a_hat, a_star):
    """Elementwise absolute deviation plus its global mean."""
    a_hat = np.asarray(a_hat, dtype=np.float64)
    a_star = np.asarray(a_star, dtype=np.float64)
    if a_hat.shape != a_star.shape:
        raise ShapeMismatch(f"shapes differ: {a_hat.shape} vs {a_star.shape}")
    diff = np.abs(a_hat - a_star)
    return diff, float(diff.mean())
