"""Training loop: one optimisation step wires feature extraction, reinforced
attention, pseudo-label selection and all losses, then applies Nesterov SGD."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import BatchPair, DomainDataset, batch_iterator
from .losses import (
    TripletBatch,
    adaptive_triplet_loss,
    adversarial_loss,
    pg_loss,
    reward,
    symnets_losses,
    total_loss,
)
from .metrics import accuracy
from .nets import (
    AttentionPolicy,
    ClassifierHead,
    FeatureNet,
    attend_embed,
    classify,
    extract_features,
    region_split,
    run_policy,
)
from .pseudo_labels import PrototypeBank, certainty_scores, pseudo_label, select_topk

log = logging.getLogger(__name__)

ITER_COLUMNS = (
    "epoch",
    "iter",
    "loss_total",
    "loss_sym",
    "loss_triplet",
    "loss_pg",
    "loss_adv",
    "mean_certainty",
    "k",
    "mean_reward",
)
EPOCH_COLUMNS = ("epoch", "target_acc", "source_acc")


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- model


@dataclass
class Model:
    features: FeatureNet
    policy: AttentionPolicy
    head: ClassifierHead

    @classmethod
    def init(cls, config: TrainConfig, d_in: int, n_classes: int, rng: np.random.Generator) -> "Model":
        d_f = config.d_feature
        hidden = (config.d_hidden_layer, config.d_hidden_layer)
        return cls(
            FeatureNet.init(d_in, d_f, hidden, rng),
            AttentionPolicy.init(d_f // (config.H * config.N), d_f, config.n_actions, rng),
            ClassifierHead.init(d_f, n_classes, rng),
        )

    def parameters(self) -> list[Tensor]:
        return self.features.parameters() + self.policy.parameters() + self.head.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def load_state(self, values) -> None:
        for p, v in zip(self.parameters(), values, strict=True):
            p.values[...] = v

    def save(self, path, config: TrainConfig, d_in: int, n_classes: int) -> None:
        arrays = {f"p{i}": v for i, v in enumerate(self.state())}
        meta = json.dumps({"config": config.to_dict(), "d_in": d_in, "n_classes": n_classes})
        np.savez(path, meta=np.array(meta), **arrays)

    @classmethod
    def load(cls, path) -> tuple["Model", TrainConfig]:
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            config = TrainConfig.from_dict(meta["config"])
            model = cls.init(config, meta["d_in"], meta["n_classes"], np.random.default_rng(0))
            model.load_state([z[f"p{i}"] for i in range(len(model.parameters()))])
        return model, config


def embed(model: Model, x, config: TrainConfig, rng=None, greedy: bool = False):
    """Fused features V = F + E (or F alone when attention is off).

    Returns (V, F, trajectory or None).
    """
    F = extract_features(model.features, x)
    if not config.ra_active:
        return F, F, None
    traj = run_policy(model.policy, region_split(ad.detach(F), config.H, config.N), rng, greedy=greedy)
    return ad.add(F, attend_embed(traj.hidden, traj.weights)), F, traj


def predict(model: Model, x, config: TrainConfig) -> np.ndarray:
    V, _, _ = embed(model, x, config, greedy=True)
    return classify(model.head, V, "target").values.argmax(axis=1)


# ---------------------------------------------------------------- optimiser


def sgd_step(params, grads, state, lr: float, momentum: float, weight_decay: float) -> None:
    """Nesterov SGD with L2 weight decay folded into the gradient:

        g = grad + wd * p;  v = mu * v + g;  p -= lr * (g + mu * v)
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        p = p.values if isinstance(p, Tensor) else p
        if p.shape != np.shape(g):
            raise ValueError(f"parameter {i}: shape {p.shape} does not match gradient {np.shape(g)}")
        d = g + weight_decay * p if weight_decay else np.array(g, dtype=float)
        if momentum:
            v = state.get(i)
            v = d.copy() if v is None else momentum * v + d
            state[i] = v
            d = d + momentum * v
        p -= lr * d


# ---------------------------------------------------------------- one step


@dataclass
class TrainerState:
    model: Model
    bank: PrototypeBank
    config: TrainConfig
    sample_rng: np.random.Generator
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    iteration: int = 0


def init_state(config: TrainConfig, d_in: int, n_classes: int) -> tuple[TrainerState, int]:
    """Build a fresh state.  Returns it with the data-order seed; weights,
    sampling and data order each get their own child of the master seed."""
    ss_w, ss_s, ss_d = np.random.SeedSequence(config.seed).spawn(3)
    model = Model.init(config, d_in, n_classes, np.random.default_rng(ss_w))
    bank = PrototypeBank(n_classes, config.d_feature, config.beta_run)
    data_seed = int(ss_d.generate_state(1)[0])
    return TrainerState(model, bank, config, np.random.default_rng(ss_s)), data_seed


def _check(name: str, t: Tensor | None) -> float:
    if t is None:
        return 0.0
    v = t.item()
    if not np.isfinite(v):
        raise TrainingAborted(f"non-finite {name} loss: {v}")
    return v


def train_step(state: TrainerState, batch: BatchPair, config: TrainConfig | None = None) -> dict:
    cfg = config or state.config
    model, rng = state.model, state.sample_rng
    B = batch.source_y.size
    ys = batch.source_y

    x = np.concatenate([batch.source_x, batch.target_x])
    V, _, traj = embed(model, x, cfg, rng)
    V_s, V_t = V[:B], V[B:]

    state.bank.update(V_s, ys)
    y_hat = pseudo_label(classify(model.head, V_t, "target"))
    sims = certainty_scores(state.bank, V_t, y_hat)
    sel = select_topk(sims, cfg.tau, rng, forced_k=cfg.fixed_k or None, pseudo_labels=y_hat)

    triplet = None
    if cfg.use_triplet:
        triplet = adaptive_triplet_loss(
            TripletBatch(V_s, ys, V_t, y_hat, sel.uncertainty, sel.mask, cfg.beta_m, cfg.triplet_weight)
        )
    rec = reward(V_s, ys, V_t, y_hat, sel.certainty)
    pg = None
    if traj is not None:
        pg = pg_loss([traj], np.concatenate([rec.reward, rec.reward]))
    adv = None
    if cfg.use_adv:
        adv = adversarial_loss(model.head, V, np.r_[np.zeros(B), np.ones(B)], cfg.adv_lambda)
    sym = symnets_losses(model.head, V_s, ys, V_t).total
    total = total_loss(sym, pg, triplet, adv, cfg.alpha)

    record = {
        "epoch": state.epoch,
        "iter": state.iteration,
        "loss_total": _check("total", total),
        "loss_sym": _check("symnets", sym),
        "loss_triplet": _check("triplet", triplet),
        "loss_pg": _check("policy-gradient", pg),
        "loss_adv": _check("adversarial", adv),
        "mean_certainty": sel.mean_selected_certainty,
        "k": sel.k,
        "mean_reward": float(rec.reward.mean()),
    }

    params = model.parameters()
    model.zero_grad()
    ad.backward(total)
    sgd_step(params, [p.grad for p in params], state.velocity, cfg.lr, cfg.momentum, cfg.weight_decay)
    state.iteration += 1
    return record


# ---------------------------------------------------------------- experiment


@dataclass
class MetricsLog:
    iterations: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "metrics.csv", ITER_COLUMNS, self.iterations)
        _write_csv(out / "epochs.csv", EPOCH_COLUMNS, self.epochs)

    def iteration_table(self) -> str:
        """The metrics CSV as text, for byte-level comparisons."""
        lines = [",".join(ITER_COLUMNS)]
        lines += [",".join(_fmt(r[c]) for c in ITER_COLUMNS) for r in self.iterations]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


@dataclass
class ExperimentResult:
    log: MetricsLog
    model: Model
    best_epoch: int
    best_target_acc: float
    final_target_acc: float
    embeddings: list[tuple[str, int, np.ndarray]]


def evaluate(model: Model, config: TrainConfig, source: DomainDataset, target: DomainDataset, epoch: int) -> dict:
    return {
        "epoch": epoch,
        "target_acc": accuracy(predict(model, target.features, config), target.labels),
        "source_acc": accuracy(predict(model, source.features, config), source.labels),
    }


def export_embeddings(model: Model, config: TrainConfig, source: DomainDataset, target: DomainDataset):
    rows = []
    for ds in (source, target):
        V, _, _ = embed(model, ds.features, config, greedy=True)
        rows += [(ds.domain, int(y), v) for y, v in zip(ds.labels, V.values)]
    return rows


def write_embeddings(rows, path) -> None:
    dim = rows[0][2].size if rows else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label", *(f"e{j}" for j in range(dim))])
        for dom, y, v in rows:
            w.writerow([dom, y, *(repr(float(x)) for x in v)])


def run_experiment(
    config: TrainConfig, source: DomainDataset, target: DomainDataset, out_dir=None
) -> ExperimentResult:
    """Full run with per-epoch target evaluation and best-checkpoint retention.

    Epoch 0 in the epoch log is the untrained model.  When ``out_dir`` is
    given, metrics.csv, epochs.csv, config.json, embeddings.csv and
    model.npz are written there; logs are flushed even if a step aborts.
    """
    n_classes = int(max(source.labels.max(), target.labels.max())) + 1
    state, data_seed = init_state(config, source.dim, n_classes)
    mlog = MetricsLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.to_json(out / "config.json")

    first = evaluate(state.model, config, source, target, 0)
    mlog.epochs.append(first)
    best_acc, best_epoch, best_state = first["target_acc"], 0, state.model.state()
    try:
        for epoch in range(1, config.epochs + 1):
            state.epoch = epoch
            state.bank.reset()
            for batch in batch_iterator(source, target, config.B, data_seed, epoch):
                mlog.iterations.append(train_step(state, batch, config))
            ev = evaluate(state.model, config, source, target, epoch)
            mlog.epochs.append(ev)
            log.info("epoch %d target_acc=%.4f source_acc=%.4f", epoch, ev["target_acc"], ev["source_acc"])
            if not config.select_best or ev["target_acc"] > best_acc:
                best_acc, best_epoch, best_state = ev["target_acc"], epoch, state.model.state()
    finally:
        if out is not None:
            mlog.write(out)

    final_acc = mlog.epochs[-1]["target_acc"]
    emb = export_embeddings(state.model, config, source, target)
    state.model.load_state(best_state)
    if out is not None:
        write_embeddings(emb, out / "embeddings.csv")
        state.model.save(out / "model.npz", config, source.dim, n_classes)
    return ExperimentResult(mlog, state.model, best_epoch, best_acc, final_acc, emb)
