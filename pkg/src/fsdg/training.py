"""Episodic training: plain updates, fixed modulation, and the
learning-to-learn loop that tunes modulation hyper-parameters.

Three modes share one update core:

  * baseline: episodic SGD on encoder (and relation head) parameters,
  * ft: the same, with stochastic feature modulation active at fixed
    hyper-parameters,
  * lft: each iteration samples a pseudo-seen and a pseudo-unseen episode
    from two different training domains.  The model takes one gradient
    step on the pseudo-seen episode with modulation active; the stepped
    parameters are kept.  The pseudo-unseen episode is then scored with
    modulation off, and the gradient of that loss with respect to the
    modulation hyper-parameters flows through the kept step (a second
    order derivative), mimicking "train here, generalize there" inside
    every iteration.

All sampling is driven by substreams keyed on the config seed and the
iteration index, so a run is a pure function of its config and inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoder import EncoderConfig, EncoderState, encode, build_encoder, BlockParams
from .errors import ConfigError, ContractError
from .ft import FTParams, init_ft_params
from .heads import (
    HEAD_KINDS,
    RelationHeadState,
    build_relation_head,
    episode_logits,
    episode_loss,
)
from .rng import RngStream
from .tasks import Domain, Episode, sample_episode

log = logging.getLogger(__name__)

MODES = ("baseline", "ft", "lft")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    mode: str = "baseline"
    head: str = "proto"
    alpha: float = 0.001
    iterations: int = 40_000
    inner_steps: int = 1
    ft_reg_weight: float = 1e-8
    ft_init_gamma: float = 0.3
    ft_init_beta: float = 0.5
    way: int = 5
    shot: int = 5
    query: int = 16
    seed: int = 0
    optimizer: str = "sgd"
    encoder_widths: tuple[int, ...] = (32, 16)
    ft_blocks: tuple[bool, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"config: unknown mode {self.mode!r}")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"config: unknown head {self.head!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"config: unknown optimizer {self.optimizer!r}")
        if self.alpha < 0.0 or self.ft_reg_weight < 0.0:
            raise ConfigError("config: alpha and ft_reg_weight must be non-negative")
        if self.iterations < 0 or self.inner_steps < 1:
            raise ConfigError("config: iterations must be >= 0 and inner_steps >= 1")
        if min(self.way, self.shot, self.query) < 1:
            raise ConfigError("config: way, shot, and query must be positive")
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            raise ConfigError("config: encoder_widths must be positive and non-empty")
        if not self.ft_blocks:
            self.ft_blocks = tuple(True for _ in self.encoder_widths)
        self.ft_blocks = tuple(bool(b) for b in self.ft_blocks)
        if len(self.ft_blocks) != len(self.encoder_widths):
            raise ConfigError("config: ft_blocks length must match encoder_widths")


@dataclass
class ModelState:
    """Everything the episodic model owns; modulation only in ft/lft mode."""

    head_kind: str
    encoder: EncoderState
    head: RelationHeadState | None = None
    ft: FTParams | None = None

    def trainable(self) -> list[tuple[str, Tensor]]:
        """The parameters the inner episodic update touches (not ft)."""
        items = list(self.encoder.parameters())
        if self.head is not None:
            items.extend(self.head.parameters())
        return items

    def ft_named(self) -> list[tuple[str, Tensor]]:
        if self.ft is None:
            return []
        flagged = [i for i, on in enumerate(self.encoder.config.ft_blocks) if on]
        items = []
        for layer, block in enumerate(flagged):
            items.append((f"ft.block{block}.gamma", self.ft.gammas[layer]))
            items.append((f"ft.block{block}.beta", self.ft.betas[layer]))
        return items

    def param_store(self) -> ParamStore:
        return ParamStore(self.trainable() + self.ft_named())

    def with_values(self, values: dict[str, Tensor]) -> "ModelState":
        """Rebuild the state with some parameters replaced (by name)."""

        def pick(name: str, old: Tensor) -> Tensor:
            return values.get(name, old)

        blocks = [
            BlockParams(
                pick(f"enc.block{i}.weight", b.weight),
                pick(f"enc.block{i}.bias", b.bias),
                pick(f"enc.block{i}.bn_scale", b.bn_scale),
                pick(f"enc.block{i}.bn_shift", b.bn_shift),
            )
            for i, b in enumerate(self.encoder.blocks)
        ]
        encoder = EncoderState(self.encoder.config, blocks)
        head = self.head
        if head is not None:
            head = RelationHeadState(
                pick("head.rel.w1", head.w1),
                pick("head.rel.b1", head.b1),
                pick("head.rel.w2", head.w2),
                pick("head.rel.b2", head.b2),
            )
        ft = self.ft
        if ft is not None:
            flagged = [i for i, on in enumerate(self.encoder.config.ft_blocks) if on]
            ft = FTParams(
                [pick(f"ft.block{b}.gamma", g) for b, g in zip(flagged, ft.gammas)],
                [pick(f"ft.block{b}.beta", t) for b, t in zip(flagged, ft.betas)],
            )
        return ModelState(self.head_kind, encoder, head, ft)


def build_model(config: TrainConfig, input_dim: int, rng: RngStream,
                encoder: EncoderState | None = None) -> ModelState:
    """Assemble a model for the configured mode, head, and widths."""
    if encoder is None:
        enc_config = EncoderConfig(input_dim, config.encoder_widths, config.ft_blocks)
        encoder = build_encoder(enc_config, rng.substream("build-encoder"))
    head = None
    if config.head == "relation":
        emb = encoder.output_dim
        head = build_relation_head(emb, emb, rng.substream("build-head"))
    ft = None
    if config.mode in ("ft", "lft"):
        channels = [w for w, on in zip(encoder.config.block_widths, encoder.config.ft_blocks) if on]
        ft = init_ft_params(channels, config.ft_init_gamma, config.ft_init_beta)
    return ModelState(config.head, encoder, head, ft)


def episode_forward(model: ModelState, episode: Episode, mode: str, use_ft: bool,
                    rng: RngStream | None = None, modulations=None) -> Tensor:
    """Encode support and query together, then score with the head."""
    batch = ad.constant(np.concatenate([episode.support_x.data, episode.query_x.data]))
    ft = model.ft if use_ft else None
    emb = encode(model.encoder, ft, batch, mode, rng, modulations)
    n_support = episode.n_way * episode.n_shot
    support = ad.narrow(emb, 0, 0, n_support)
    query = ad.narrow(emb, 0, n_support, emb.shape[0])
    return episode_logits(model.head_kind, support, episode.support_y, query,
                          episode.n_way, model.head)


def inner_update(model: ModelState, episode: Episode, ft_enabled: bool, alpha: float,
                 create_graph: bool, rng: RngStream | None = None,
                 modulations=None) -> tuple[ModelState, float]:
    """One episodic gradient step on encoder and head parameters.

    With create_graph the stepped parameters stay attached to the graph
    (in particular to the modulation hyper-parameters through the sampled
    perturbation), so a later loss of the stepped model can be
    differentiated with respect to those hyper-parameters.  Without it
    the result is a plain detached model.
    """
    logits = episode_forward(model, episode, "train", ft_enabled, rng, modulations)
    loss = episode_loss(logits, episode.query_y)
    names = [n for n, _ in model.trainable()]
    params = [t for _, t in model.trainable()]
    grads = ad.backward(loss, params, create_graph=create_graph)
    if create_graph:
        stepped = {n: ad.sub(t, ad.scale(g, alpha)) for n, t, g in zip(names, params, grads)}
    else:
        stepped = {n: ad.leaf(t.data - alpha * g.data) for n, t, g in zip(names, params, grads)}
    return model.with_values(stepped), loss.item()


def pseudo_unseen_loss(model: ModelState, episode: Episode) -> Tensor:
    """Episode loss with modulation off (evaluation-style forward pass)."""
    logits = episode_forward(model, episode, "eval", use_ft=False)
    return episode_loss(logits, episode.query_y)


def ft_regularizer(model: ModelState, weight: float) -> Tensor:
    """weight * sum of squared modulation hyper-parameters."""
    if model.ft is None or not model.ft.tensors():
        return ad.constant(0.0)
    total = None
    for t in model.ft.tensors():
        s = ad.tensor_sum(ad.square(t))
        total = s if total is None else ad.add(total, s)
    return ad.scale(total, weight)


def lft_outer_loss(model: ModelState, pseudo_seen: Episode, pseudo_unseen: Episode,
                   config: TrainConfig, rng: RngStream,
                   ) -> tuple[Tensor, float, float, ModelState]:
    """Pseudo-unseen loss of the stepped model plus the hyper-parameter
    penalty, as one graph-attached scalar.

    Returns (total, pseudo-seen loss, pseudo-unseen loss, stepped model).
    The total is differentiable with respect to the modulation
    hyper-parameters of ``model``; gradients flow through the kept inner
    step(s), which is where the second-order term comes from.
    """
    if model.ft is None:
        raise ContractError("lft_outer_loss: model has no modulation hyper-parameters")
    stepped = model
    loss_ps = 0.0
    for step in range(config.inner_steps):
        stepped, loss_ps = inner_update(
            stepped, pseudo_seen, ft_enabled=True, alpha=config.alpha,
            create_graph=True, rng=rng.substream("inner-noise", step),
        )
    loss_pu_t = pseudo_unseen_loss(stepped, pseudo_unseen)
    total = ad.add(loss_pu_t, ft_regularizer(model, config.ft_reg_weight))
    return total, loss_ps, loss_pu_t.item(), stepped


def lft_train_step(model: ModelState, pseudo_seen: Episode, pseudo_unseen: Episode,
                   config: TrainConfig, rng: RngStream,
                   optimizer: "Adam | None" = None) -> tuple[ModelState, float, float]:
    """One full learning-to-learn iteration.

    Keeps the inner-stepped encoder/head parameters and applies the
    meta-gradient to the modulation hyper-parameters, all at the same
    step size.  The differentiation graph dies with this call's locals.
    """
    total, loss_ps, loss_pu, stepped = lft_outer_loss(model, pseudo_seen, pseudo_unseen, config, rng)
    ft_items = model.ft_named()
    ft_tensors = [t for _, t in ft_items]
    meta_grads = ad.backward(total, ft_tensors) if ft_tensors else []

    new_values: dict[str, Tensor] = {}
    if optimizer is None:
        for (name, theta), g in zip(ft_items, meta_grads):
            new_values[name] = ad.leaf(theta.data - config.alpha * g.data)
        for name, t in stepped.trainable():
            new_values[name] = ad.leaf(t.data)
    else:
        # Adaptive variant: the meta-gradient still flows through the
        # vanilla inner step; persistence itself uses adaptive updates
        # driven by the first-step episodic gradients (noise replayed).
        replay = rng.substream("inner-noise", 0)
        logits = episode_forward(model, pseudo_seen, "train", True, replay)
        loss = episode_loss(logits, pseudo_seen.query_y)
        names = [n for n, _ in model.trainable()]
        params = [t for _, t in model.trainable()]
        grads = ad.backward(loss, params)
        new_values.update(optimizer.step(
            {n: (t, g) for n, t, g in zip(names, params, grads)}))
        new_values.update(optimizer.step(
            {n: (t, g) for (n, t), g in zip(ft_items, meta_grads)}))
    return model.with_values(new_values), loss_ps, loss_pu


class Adam:
    """Adaptive moment estimation over named parameters (numpy state)."""

    def __init__(self, alpha: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, named: dict[str, tuple[Tensor, Tensor]]) -> dict[str, Tensor]:
        out = {}
        for name, (theta, grad) in named.items():
            g = grad.data
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            out[name] = ad.leaf(theta.data - self.alpha * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


@dataclass
class LogRow:
    iteration: int
    mode: str
    loss_ps: float
    loss_pu: float | None = None


def _format_log_row(row: LogRow) -> str:
    pu = "" if row.loss_pu is None else f"{row.loss_pu:.6f}"
    return f"{row.iteration},{row.mode},{row.loss_ps:.6f},{pu}\n"


def train_loop(config: TrainConfig, domains: Sequence[Domain],
               init: ModelState | None = None,
               log_file: IO[str] | None = None) -> tuple[ModelState, list[LogRow]]:
    """Run the configured number of episodic iterations over seen domains.

    Every iteration draws its domains, episodes, and modulation noise from
    substreams keyed by (config seed, iteration), so runs with equal
    inputs produce bit-identical models.  The learning-to-learn mode needs
    two domains; with a single seen domain it degrades to two independent
    episodes of that domain and says so once on the log.
    """
    if not domains:
        raise ConfigError("train_loop: at least one seen domain required")
    dims = {d.dim for d in domains}
    if len(dims) != 1:
        raise ConfigError(f"train_loop: domains disagree on feature dim: {sorted(dims)}")

    root = RngStream(config.seed)
    model = init if init is not None else build_model(config, domains[0].dim, root)
    if config.mode in ("ft", "lft") and model.ft is None:
        raise ConfigError(f"train_loop: mode {config.mode!r} needs modulation parameters")
    if config.mode == "baseline" and model.ft is not None:
        raise ConfigError("train_loop: baseline mode must not carry modulation parameters")
    if config.mode == "lft" and len(domains) < 2:
        log.warning(
            "learning-to-learn with a single seen domain: pseudo-seen and "
            "pseudo-unseen episodes will come from the same domain"
        )

    optimizer = Adam(config.alpha) if config.optimizer == "adam" else None
    if log_file is not None:
        log_file.write("iter,mode,loss_ps,loss_pu\n")

    rows: list[LogRow] = []
    for it in range(config.iterations):
        if config.mode in ("baseline", "ft"):
            pick = root.substream("loop-domain", it).integers(1, len(domains))[0]
            episode = sample_episode(domains[int(pick)], config.way, config.shot,
                                     config.query, root.substream("ps-episode", it))
            noise = root.substream("ft-noise", it)
            if optimizer is None:
                model, loss_ps = inner_update(model, episode, config.mode == "ft",
                                              config.alpha, create_graph=False, rng=noise)
            else:
                logits = episode_forward(model, episode, "train", config.mode == "ft", noise)
                loss_t = episode_loss(logits, episode.query_y)
                names = [n for n, _ in model.trainable()]
                params = [t for _, t in model.trainable()]
                grads = ad.backward(loss_t, params)
                model = model.with_values(optimizer.step(
                    {n: (t, g) for n, t, g in zip(names, params, grads)}))
                loss_ps = loss_t.item()
            row = LogRow(it, config.mode, loss_ps)
        else:
            if len(domains) >= 2:
                pair = root.substream("loop-domain", it).sample_without_replacement(len(domains), 2)
                ps_dom, pu_dom = domains[pair[0]], domains[pair[1]]
            else:
                ps_dom = pu_dom = domains[0]
            ps = sample_episode(ps_dom, config.way, config.shot, config.query,
                                root.substream("ps-episode", it))
            pu = sample_episode(pu_dom, config.way, config.shot, config.query,
                                root.substream("pu-episode", it))
            model, loss_ps, loss_pu = lft_train_step(model, ps, pu, config,
                                                     root.substream("ft-noise", it), optimizer)
            row = LogRow(it, config.mode, loss_ps, loss_pu)
        rows.append(row)
        if log_file is not None:
            log_file.write(_format_log_row(row))
            if (it + 1) % 100 == 0:
                log_file.flush()
    if log_file is not None:
        log_file.flush()
    return model, rows


def pretrain_encoder(encoder: EncoderState, domain: Domain, epochs: int,
                     batch_size: int, alpha: float, rng: RngStream,
                     split: str | None = None) -> tuple[EncoderState, list[float]]:
    """Supervised warm start: classify all base classes with a throwaway
    linear layer, mini-batch SGD, modulation inactive throughout.

    Returns the updated encoder and the mean loss per epoch; the linear
    classifier is dropped on return.
    """
    if epochs < 1:
        raise ContractError("pretrain_encoder: epochs must be positive")
    if batch_size < 2:
        raise ContractError("pretrain_encoder: batch size must be at least 2 for batch norm")
    ids = domain.class_ids(split)
    if len(ids) < 2:
        raise ContractError("pretrain_encoder: need at least two base classes")
    xs = np.concatenate([domain.classes[cid] for cid in ids])
    ys = np.concatenate([np.full(domain.classes[cid].shape[0], k) for k, cid in enumerate(ids)])
    n, k_classes = xs.shape[0], len(ids)

    head_rng = rng.substream("pretrain-head")
    from .encoder import glorot_uniform

    weight = ad.leaf(glorot_uniform(head_rng, encoder.output_dim, k_classes))
    bias = ad.leaf(np.zeros(k_classes))

    epoch_losses = []
    for epoch in range(epochs):
        order = rng.substream("pretrain-epoch", epoch).permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) < 2:
                continue  # batch norm cannot use a single row
            batch = ad.constant(xs[chunk])
            labels = [int(ys[i]) for i in chunk]
            emb = encode(encoder, None, batch, "train")
            logits = ad.add(ad.matmul(emb, weight), bias)
            loss = episode_loss(logits, labels)
            params = [t for _, t in encoder.parameters()] + [weight, bias]
            grads = ad.backward(loss, params)
            stepped = [ad.leaf(t.data - alpha * g.data) for t, g in zip(params, grads)]
            enc_params = stepped[:-2]
            names = [name for name, _ in encoder.parameters()]
            lookup = dict(zip(names, enc_params))
            blocks = [
                BlockParams(
                    lookup[f"enc.block{i}.weight"],
                    lookup[f"enc.block{i}.bias"],
                    lookup[f"enc.block{i}.bn_scale"],
                    lookup[f"enc.block{i}.bn_shift"],
                )
                for i in range(len(encoder.blocks))
            ]
            encoder = EncoderState(encoder.config, blocks)
            weight, bias = stepped[-2], stepped[-1]
            batch_losses.append(loss.item())
        epoch_losses.append(float(np.mean(batch_losses)))
    return encoder, epoch_losses
