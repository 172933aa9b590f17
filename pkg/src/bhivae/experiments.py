"""Experiment harnesses shared by ``scripts/`` and the acceptance tests."""
from __future__ import annotations

import json

import numpy as np

from . import ndgrad as G
from .config import RunConfig, config_from_dict
from .data import Dataset, gen_minidsprites, replicate
from .metrics import block_mig
from .model import decode_array, encode, encode_array, group, init_params
from .nn import MlpSpec, accuracy, init_mlp, mlp_forward, softmax_cross_entropy
from .objectives import BlockPrior, permute_joint, reconstruction_loss, sample_prior, tc_estimate
from .optim import Adam, AdamConfig
from .train import TrainResult, architecture, fit_probe, fit_projection_probe, layer_kl_diagnostics, train

SUPERVISED_LAYOUT = {"s_dims": [2, 2, 2], "h_dims": [8, 8], "c_dim": 6}
UNSUPERVISED_LAYOUT = {"s_dims": [2, 2, 2], "h_dims": [8, 6], "c_dim": 4}


def desk_dataset(min_size: int = 5000, seed: int = 0) -> Dataset:
    """The 3 shapes x 3 scales x 4 x-positions x 4 y-positions grid, replicated."""
    return replicate(gen_minidsprites(resolution=32, seed=seed), min_size)


def supervised_config(**overrides) -> RunConfig:
    base = {"mode": "supervised", "layout": SUPERVISED_LAYOUT, "beta": 10.0, "gamma": 3.0, "total_steps": 5000}
    base.update(overrides)
    return config_from_dict(base)


def unsupervised_config(**overrides) -> RunConfig:
    base = {"mode": "unsupervised", "layout": UNSUPERVISED_LAYOUT, "beta": 10.0, "gamma": 3.0, "total_steps": 5000}
    base.update(overrides)
    return config_from_dict(base)


def supervised_report(result: TrainResult, probe_steps: int = 2000) -> dict:
    """Held-out accuracy of each layer's own classifier on ``s^i``, and of
    two probes reading the same factor from the carrier ``h^i`` (``c`` at the
    last layer): a fresh copy of the training adversary (projection into the
    frozen shared classifier) and an unconstrained MLP.  Carriers are sampled
    through the encoder noise, which is what the next layer consumes."""
    cfg, arch, params = _unpack(result)
    tr, te = result.train_set, result.test_set
    code_tr = encode(params, arch, tr.images, "stochastic", seed=[cfg.seed, 0])
    code_te = encode(params, arch, te.images, "stochastic", seed=[cfg.seed, 1])
    mean_te = encode(params, arch, te.images)
    layers = []
    for i, name in enumerate(cfg.supervised_factors):
        y_tr, y_te = tr.factors.column(name), te.factors.column(name)
        n = arch.n_classes[i]
        cls = group(params, f"cls{i}")
        s_acc = accuracy(mlp_forward(cls, mean_te.s_parts[i]).value, y_te)
        h_tr, h_te = code_tr.carrier(i).value, code_te.carrier(i).value
        adv = fit_projection_probe(h_tr, y_tr, h_te, y_te, cls, arch.projection_hidden, probe_steps, seed=cfg.seed)
        free = fit_probe(h_tr, y_tr, h_te, y_te, n, steps=probe_steps, seed=cfg.seed)
        layers.append(
            {
                "factor": name,
                "classes": n,
                "chance": 1.0 / n,
                "s_accuracy": s_acc,
                "h_probe_accuracy": adv,
                "h_mlp_probe_accuracy": free,
            }
        )
    return {"layers": layers}


def _unpack(result: TrainResult):
    return config_from_dict(json.loads(result.checkpoint.config_json)), result.arch, result.params


def mean_reconstruction(params, arch, images: np.ndarray) -> float:
    x_hat = decode_array(params, arch, encode_array(params, arch, images))
    return float(reconstruction_loss(images, x_hat).value)


def unsupervised_report(result: TrainResult, max_samples: int = 10000) -> dict:
    """Reconstruction, block MIG and per-layer Gaussian-fit KL for the trained
    model and for its own initialization."""
    cfg, arch, params = _unpack(result)
    data = result.test_set if len(result.test_set) >= 200 else result.train_set
    full = result.train_set
    idx = np.arange(min(len(full), max_samples))
    images, table = full.images[idx], full.factors.subset(idx)
    init = init_params(arch, cfg.seed)
    out = {}
    for tag, p in (("init", init), ("trained", params)):
        z = encode_array(p, arch, images)
        out[tag] = {
            "recon": mean_reconstruction(p, arch, data.images),
            "block_mig": block_mig(z, arch.layout, table, cfg.metrics.bins),
            "layer_kl": layer_kl_diagnostics(p, arch, images, cfg.rho),
        }
    return out


def block_vs_single(total_steps: int = 2000, seed: int = 0, factor: str = "scale", dataset: Dataset | None = None) -> dict:
    """Train the supervised model twice, with a 2-wide and a 1-wide first
    block (the residual absorbs the freed coordinate), and report how well a
    fresh classifier reads ``factor`` from the full code of each."""
    dataset = dataset if dataset is not None else desk_dataset(seed=seed)
    report = {"factor": factor, "steps": total_steps, "runs": {}}
    for tag, s1 in (("block", 2), ("single", 1)):
        lay = dict(SUPERVISED_LAYOUT)
        lay["s_dims"] = [s1] + SUPERVISED_LAYOUT["s_dims"][1:]
        lay["c_dim"] = SUPERVISED_LAYOUT["c_dim"] + (2 - s1)
        cfg = supervised_config(layout=lay, total_steps=total_steps, seed=seed,
                                supervised_factors=[factor, "pos_x", "shape"])
        res = train(cfg, dataset)
        z_tr = encode_array(res.params, res.arch, res.train_set.images)
        z_te = encode_array(res.params, res.arch, res.test_set.images)
        y_tr, y_te = res.train_set.factors.column(factor), res.test_set.factors.column(factor)
        n = res.train_set.factors.cardinalities[res.train_set.factors.names.index(factor)]
        acc = fit_probe(z_tr, y_tr, z_te, y_te, n, hidden=(), seed=seed)
        report["runs"][tag] = {"s1_dim": s1, "c_dim": lay["c_dim"], "accuracy": acc}
    report["block_better"] = report["runs"]["block"]["accuracy"] >= report["runs"]["single"]["accuracy"]
    return report


def tc_discriminator_check(n: int = 20_000, rho: float = 0.5, steps: int = 1500, batch: int = 256, seed: int = 0) -> dict:
    """Fit a sigmoid discriminator between a correlated bivariate Gaussian
    and its row-permuted copy, then read off the mutual information with
    ``tc_estimate`` on fresh joint samples."""
    prior = BlockPrior((2,), 0, rho)
    joint = sample_prior(prior, n, [seed, 0])
    perm = permute_joint(joint[:, :1], joint[:, 1:], [seed, 1])
    x = np.concatenate([joint, perm])
    y = np.repeat([1, 0], n)
    spec = MlpSpec((2, 32, 32, 1), hidden_activation="tanh")
    params = {}
    for i, layer in enumerate(init_mlp(spec, [seed, 2])):
        params[f"disc.{i}.w"], params[f"disc.{i}.b"] = layer.weight, layer.bias
    names = list(params)
    opt = Adam(params, AdamConfig(step_size=3e-3))
    rng = np.random.default_rng([seed, 3])
    zero = np.zeros((batch, 1))
    for _ in range(steps):
        idx = rng.integers(0, len(x), size=batch)
        P = {k: G.variable(params[k]) for k in names}
        logit = mlp_forward(group(P, "disc"), x[idx])
        loss = softmax_cross_entropy(G.concat([zero, logit]), y[idx])
        opt.step(params, dict(zip(names, G.backward(loss, [P[k] for k in names]))))

    def discriminator(z):
        return G.sigmoid(mlp_forward(group(params, "disc"), z)).value[:, 0]

    held_out = sample_prior(prior, n, [seed, 4])
    estimate = float(tc_estimate(discriminator, held_out).value)
    analytic = float(-0.5 * np.log(1 - rho**2))
    return {"estimate": estimate, "analytic": analytic, "relative_error": abs(estimate - analytic) / analytic}
