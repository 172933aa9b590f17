"""Training loop, evaluation and traversal rendering."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import ndgrad as G
from .checkpoint import Checkpoint
from .config import RunConfig, config_from_dict
from .data import (
    Dataset,
    FactorSpec,
    batch_iter,
    gen_minidsprites,
    load_dataset_dir,
    load_idx,
    replicate,
    split,
    DEFAULT_SPECS,
)
from .metrics import DatasetPairSampler, ScoreReport, block_mig, mig, sap, z_diff
from .model import Architecture, assemble, decode, encode, encode_array, group, init_params, traverse_block
from .ndgrad import NumericalError, ShapeError
from .nn import MlpSpec, accuracy, init_mlp, mlp_forward, softmax_cross_entropy
from .objectives import (
    BlockPrior,
    discriminator_losses,
    gaussian_kl,
    max_entropy_erasure,
    permute_joint,
    probe_loss,
    reconstruction_loss,
    sample_prior,
    supervised_layer_loss,
    total_supervised_loss,
    total_unsupervised_loss,
)
from .optim import Adam, AdamConfig

log = logging.getLogger(__name__)

TRAVERSAL_RANGE = (-3.0, 3.0)


class TrainingError(RuntimeError):
    pass


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "minidsprites":
        specs = [FactorSpec(f["name"], int(f["cardinality"]), f.get("role", f["name"])) for f in d.factors]
        base = gen_minidsprites(specs or DEFAULT_SPECS, d.resolution, cfg.seed)
        return replicate(base, d.min_size) if d.min_size > len(base) else base
    if d.kind == "idx":
        return load_idx(d.images_path, d.labels_path or None)
    if d.kind == "dir":
        return load_dataset_dir(d.path)
    raise ValueError(f"unknown dataset kind {d.kind!r}")


def architecture(cfg: RunConfig, dataset: Dataset) -> Architecture:
    m = cfg.model
    supervised = cfg.mode == "supervised"
    n_classes = None
    if supervised:
        n_classes = tuple(dataset.factors.cardinalities[dataset.factors.names.index(n)] for n in cfg.supervised_factors)
    return Architecture(
        layout=cfg.layout,
        data_dim=dataset.data_dim,
        stochastic=supervised,
        encoder_hidden=m.encoder_hidden,
        part_hidden=m.part_hidden,
        merge_width=m.merge_width,
        decoder_hidden=m.decoder_hidden,
        n_classes=n_classes,
        classifier_hidden=m.classifier_hidden,
        projection_hidden=m.projection_hidden,
        discriminator_hidden=None if supervised else m.discriminator_hidden,
        init_log_var=m.init_log_var,
    )


def layer_priors(cfg: RunConfig) -> list[BlockPrior]:
    lay = cfg.layout
    return [BlockPrior.for_layer(lay.s_dims[i], lay.carrier_dim(i), cfg.rho) for i in range(lay.num_layers)]


# --- one optimization step ------------------------------------------------------


def supervised_objective(P, arch: Architecture, cfg: RunConfig, x, labels, step: int):
    """Returns (objective, total, terms).  ``objective`` adds the adversarial
    probe losses to ``total``; stop-gradients route each part to its owner."""
    lay = arch.layout
    w = cfg.weights
    code = encode(P, arch, x, "stochastic", seed=[cfg.seed, step])
    class_terms, erasures, probes, terms = [], [], [], {}
    for i in range(lay.num_layers):
        s_dim = lay.s_dims[i]
        mu_s = G.slice_last(code.means[i], 0, s_dim)
        lv_s = G.slice_last(code.log_vars[i], 0, s_dim)
        cls, proj = group(P, f"cls{i}"), group(P, f"proj{i}")
        class_terms.append(supervised_layer_loss(mu_s, lv_s, code.s_parts[i], labels[i], cls, w.beta))
        erasures.append(max_entropy_erasure(code.carrier(i), cls, proj))
        probes.append(probe_loss(code.carrier(i), labels[i], cls, proj))
        terms[f"class{i}"] = class_terms[-1]
        terms[f"erasure{i}"] = erasures[-1]
    recon = reconstruction_loss(x, decode(P, arch, assemble(code)))
    terms["recon"] = recon
    total = total_supervised_loss(class_terms, erasures, w, recon)
    objective = total
    for i, p in enumerate(probes):
        objective = G.add(objective, p)
        terms[f"probe{i}"] = p
    return objective, total, terms


def unsupervised_objective(P, arch: Architecture, cfg: RunConfig, x, priors, step: int):
    lay = arch.layout
    code = encode(P, arch, x, "deterministic")
    kls, tcs, terms = [], [], {}
    objective_extra = []
    for i in range(lay.num_layers):
        z = code.layer(i)
        perm = permute_joint(code.s_parts[i].value, code.carrier(i).value, [cfg.seed, step, i, 0])
        prior = sample_prior(priors[i], x.shape[0], [cfg.seed, step, i, 1])
        adv = discriminator_losses(group(P, f"disc{i}"), z, prior, perm)
        kls.append(adv.gen_kl)
        tcs.append(adv.gen_tc)
        objective_extra.append(adv.disc_loss)
        terms[f"kl{i}"] = adv.gen_kl
        terms[f"tc{i}"] = adv.gen_tc
        terms[f"disc{i}"] = adv.disc_loss
    recon = reconstruction_loss(x, decode(P, arch, assemble(code)))
    terms["recon"] = recon
    total = total_unsupervised_loss(kls, tcs, recon, cfg.weights)
    objective = total
    for d in objective_extra:
        objective = G.add(objective, d)
    return objective, total, terms


def reconcile(record: dict, cfg: RunConfig) -> float:
    """Absolute difference between a trace record's total and the weighted sum of its terms."""
    t, w, L = record["terms"], cfg.weights, cfg.layout.num_layers
    if cfg.mode == "supervised":
        s = sum(t[f"class{i}"] + w.gamma * t[f"erasure{i}"] for i in range(L)) + w.beta * t["recon"]
    else:
        s = sum(t[f"kl{i}"] + w.gamma * t[f"tc{i}"] for i in range(L)) + w.beta * t["recon"]
    return abs(record["total"] - s)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[dict]
    params: dict[str, np.ndarray]  # float64 parameters at the end of training
    arch: Architecture
    train_set: Dataset
    test_set: Dataset


def train(
    cfg: RunConfig,
    dataset: Dataset | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam on the mode's total loss; deterministic in ``cfg.seed``."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    train_set, test_set = split(dataset, cfg.dataset.holdout, cfg.seed)
    arch = architecture(cfg, dataset)
    params = init_params(arch, cfg.seed)
    opt = Adam(params, cfg.optimizer)
    priors = layer_priors(cfg)
    names = list(params)
    trace: list[dict] = []

    batches = batch_iter(train_set, min(cfg.batch_size, len(train_set)), cfg.seed)
    for step in range(cfg.total_steps):
        idx, x, f = next(batches)
        P = {k: G.variable(params[k], name=k) for k in names}
        try:
            if cfg.mode == "supervised":
                labels = [f[:, train_set.factors.names.index(n)] for n in cfg.supervised_factors]
                objective, total, terms = supervised_objective(P, arch, cfg, x, labels, step)
            else:
                objective, total, terms = unsupervised_objective(P, arch, cfg, x, priors, step)
        except NumericalError as e:
            raise TrainingError(f"non-finite value at step {step}: {e}") from e
        record = {"step": step, "total": float(total.value), "terms": {k: float(v.value) for k, v in terms.items()}}
        if not np.isfinite(record["total"]):
            raise TrainingError(f"non-finite loss at step {step}: {record['terms']}")
        grads = G.backward(objective, [P[k] for k in names])
        opt.step(params, dict(zip(names, grads)))
        if step % cfg.log_every == 0:
            trace.append(record)
            if on_step is not None:
                on_step(record)

    ckpt = Checkpoint(
        config_json=cfg.to_json(),
        params={k: v.astype(np.float32) for k, v in params.items()},
        step=cfg.total_steps,
        adam_t=opt.t,
        adam_m={k: v.astype(np.float32) for k, v in opt.m.items()},
        adam_v={k: v.astype(np.float32) for k, v in opt.v.items()},
    )
    return TrainResult(ckpt, trace, params, arch, train_set, test_set)


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --- evaluation -----------------------------------------------------------------


def restore(ckpt: Checkpoint, dataset: Dataset | None = None) -> tuple[RunConfig, Architecture, dict[str, np.ndarray]]:
    cfg = config_from_dict(json.loads(ckpt.config_json))
    dataset = dataset if dataset is not None else load_dataset(cfg)
    arch = architecture(cfg, dataset)
    params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    expected = init_params(arch, 0)
    bad = [k for k in expected if k not in params or params[k].shape != expected[k].shape]
    if bad or len(expected) != len(params):
        raise ShapeError(f"checkpoint does not match the dataset/layout (first mismatch: {bad[:1] or 'extra groups'})")
    return cfg, arch, params


def layer_kl_diagnostics(params, arch: Architecture, x: np.ndarray, rho: float) -> list[float]:
    """Gaussian moment-fit KL(q(s^i) || N(0, Sigma_block)) for each layer."""
    code = encode(params, arch, x)
    out = []
    for s in code.s_parts:
        v = s.value
        prior = BlockPrior((v.shape[1],), 0, (rho,))
        cov = np.atleast_2d(np.cov(v, rowvar=False)) + 1e-9 * np.eye(v.shape[1])
        out.append(gaussian_kl(v.mean(axis=0), cov, prior.covariance))
    return out


def score_latents(latents: np.ndarray, images: np.ndarray, dataset: Dataset, layout, encoder_fn, cfg: RunConfig) -> ScoreReport:
    m = cfg.metrics
    table = dataset.factors
    report = ScoreReport(
        z_diff=z_diff(encoder_fn, DatasetPairSampler(images, table), m.votes, m.pairs, cfg.seed),
        sap=sap(latents, table),
        mig=mig(latents, table, m.bins),
        block_mig=block_mig(latents, layout, table, m.bins),
    )
    return report


def evaluate(ckpt: Checkpoint, dataset: Dataset, max_samples: int | None = None) -> ScoreReport:
    """Metric report for a checkpoint on a dataset; the checkpoint is not modified."""
    cfg, arch, params = restore(ckpt, dataset)
    if dataset.data_dim != arch.data_dim:
        raise ShapeError(f"dataset has {dataset.data_dim} pixels, checkpoint expects {arch.data_dim}")
    n = min(len(dataset), max_samples or cfg.metrics.max_samples)
    idx = np.random.default_rng(cfg.seed).choice(len(dataset), size=n, replace=False) if n < len(dataset) else np.arange(n)
    sub = dataset.subset(np.sort(idx))

    def encoder_fn(x):
        return encode_array(params, arch, x)

    latents = encoder_fn(sub.images)
    report = score_latents(latents, sub.images, sub, arch.layout, encoder_fn, cfg)
    report.layer_kl = layer_kl_diagnostics(params, arch, sub.images, cfg.rho)
    report.per_factor = {"names": list(sub.factors.names)}
    return report


# --- traversal ------------------------------------------------------------------


def traversal_grid(params, arch: Architecture, x: np.ndarray, steps: int, sub_width: int = 2) -> np.ndarray:
    """Decoded images for every traversable block (rows) and value of t (columns)."""
    if steps < 2:
        raise ValueError("need at least two traversal steps")
    z = encode_array(params, arch, x[None, :])
    ts = np.linspace(*TRAVERSAL_RANGE, steps)
    rows = []
    for b in range(len(arch.layout.traversal_blocks(sub_width))):
        codes = np.concatenate([traverse_block(z, arch.layout, b, t, sub_width) for t in ts])
        rows.append(decode(params, arch, codes).value)
    return np.stack(rows)  # (blocks, steps, pixels)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255) of a [0, 1] image."""
    h, w = image.shape
    pixels = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def emit_traversal(ckpt: Checkpoint, sample_index: int, steps: int, out_path, dataset: Dataset | None = None) -> np.ndarray:
    cfg, arch, params = restore(ckpt, dataset)
    dataset = dataset if dataset is not None else load_dataset(cfg)
    if not 0 <= sample_index < len(dataset):
        raise IndexError(f"sample index {sample_index} outside [0, {len(dataset) - 1}]")
    grid = traversal_grid(params, arch, dataset.images[sample_index], steps)
    h, w = dataset.resolution
    rows, cols = grid.shape[:2]
    tiles = grid.reshape(rows, cols, h, w).transpose(0, 2, 1, 3).reshape(rows * h, cols * w)
    write_pgm(out_path, tiles)
    return tiles


# --- probes -----------------------------------------------------------------------


def fit_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    n_classes: int,
    hidden: tuple[int, ...] = (64, 64),
    steps: int = 2000,
    batch: int = 128,
    seed: int = 0,
) -> float:
    """Held-out accuracy of a freshly trained MLP classifier on standardized features."""
    mean, std = train_x.mean(axis=0), train_x.std(axis=0) + 1e-8
    tx, vx = (train_x - mean) / std, (test_x - mean) / std
    spec = MlpSpec((tx.shape[1], *hidden, n_classes))
    params = {}
    for i, layer in enumerate(init_mlp(spec, seed)):
        params[f"probe.{i}.w"], params[f"probe.{i}.b"] = layer.weight, layer.bias
    opt = Adam(params, AdamConfig(step_size=3e-3))
    rng = np.random.default_rng(seed)
    names = list(params)
    for _ in range(steps):
        idx = rng.integers(0, len(tx), size=min(batch, len(tx)))
        P = {k: G.variable(params[k]) for k in names}
        loss = softmax_cross_entropy(mlp_forward(group(P, "probe"), tx[idx]), train_y[idx])
        opt.step(params, dict(zip(names, G.backward(loss, [P[k] for k in names]))))
    return accuracy(mlp_forward(group(params, "probe"), vx).value, test_y)


def fit_projection_probe(
    train_h: np.ndarray,
    train_y: np.ndarray,
    test_h: np.ndarray,
    test_y: np.ndarray,
    classifier,
    hidden: tuple[int, ...] = (64,),
    steps: int = 2000,
    batch: int = 128,
    seed: int = 0,
) -> float:
    """Held-out accuracy of a fresh copy of the training adversary: a
    projection from the carrier into the feature-block space, read by the
    frozen shared ``classifier``."""
    mean, std = train_h.mean(axis=0), train_h.std(axis=0) + 1e-8
    th, vh = (train_h - mean) / std, (test_h - mean) / std
    s_dim = classifier[0].weight.shape[0]
    params = {}
    for i, layer in enumerate(init_mlp(MlpSpec((th.shape[1], *hidden, s_dim)), seed)):
        params[f"proj.{i}.w"], params[f"proj.{i}.b"] = layer.weight, layer.bias
    opt = Adam(params, AdamConfig(step_size=3e-3))
    rng = np.random.default_rng(seed)
    names = list(params)
    for _ in range(steps):
        idx = rng.integers(0, len(th), size=min(batch, len(th)))
        P = {k: G.variable(params[k]) for k in names}
        loss = probe_loss(th[idx], train_y[idx], classifier, group(P, "proj"))
        opt.step(params, dict(zip(names, G.backward(loss, [P[k] for k in names]))))
    logits = mlp_forward(classifier, mlp_forward(group(params, "proj"), vh))
    return accuracy(logits.value, test_y)
