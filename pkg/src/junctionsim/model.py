"""Scene-aware attention dynamics model.

Encoder-interaction-prediction structure: per-agent temporal encoding and map
context encoding, a dual-cross attention exchange between agents and context,
a set transformer over agents, and per-category Gaussian trajectory heads plus
a shared transition head. Everything runs on the in-house float64 autodiff
tape so gradients are exact and reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import ModelInputs, Targets
from .scene import FRAME_DT

LN_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    pass


class EmptyBatchError(ModelError):
    pass


class GradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 32
    attention_heads: int = 2
    interaction_layers: int = 2
    t_hist: int = 10
    t_pred: int = 10
    head_hidden: int = 64
    attention_mode: str = "dual"  # "dual" or "uni" (single cross pass, ablation)
    sigma_floor: float = 1e-4
    heading_loss_weight: float = 1.0
    transition_loss_weight: float = 0.5

    def __post_init__(self):
        if self.latent_dim % self.attention_heads != 0:
            raise ModelError(
                f"latent_dim {self.latent_dim} not divisible by "
                f"{self.attention_heads} heads"
            )
        if self.attention_mode not in ("dual", "uni"):
            raise ModelError(f"unknown attention_mode {self.attention_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class PredictionTensors:
    """Forward-pass outputs still attached to the tape."""

    agent_ids: tuple[str, ...]
    mu: Tensor                 # (N, T_pred, 2) absolute origin-relative means
    sigma: Tensor              # (N, T_pred, 2) strictly positive
    heading_vec: Tensor        # (N, T_pred, 2) unnormalized heading vectors
    transition_logits: Tensor  # (N, 3)


@dataclass(frozen=True)
class PredictionOutput:
    """Detached numpy view of a forward pass."""

    agent_ids: tuple[str, ...]
    mu: np.ndarray
    sigma: np.ndarray
    heading_vec: np.ndarray
    transition_logits: np.ndarray


@dataclass(frozen=True)
class LossTerms:
    total: Tensor
    position: Tensor
    heading: Tensor
    transition: Tensor

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "position": self.position.item(),
            "heading": self.heading.item(),
            "transition": self.transition.item(),
        }


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


_KIND_NAMES = ("mv", "nmv", "ped")

# internal normalization: the network sees coordinates in ~[-3, 3] and emits
# offsets/sigmas in decameters, which keeps clipped SGD well conditioned
_POS_SCALE = 0.05
_VEL_SCALE = 0.125
_STATE_SCALE = np.array([_POS_SCALE, _POS_SCALE, _VEL_SCALE, _VEL_SCALE, 1.0, 1.0])
_ROUTE_SCALE = np.array([_POS_SCALE, _POS_SCALE, 1.0, 1.0, 1.0])
_LIGHT_SCALE = np.array([1.0, 1.0, 1.0, _POS_SCALE, _POS_SCALE])
_RESIDUAL_SCALE = 5.0
_SIGMA_SCALE = 2.0
# per-category sigma bias inits, roughly matching each category's motion
# scale so the rarely-supervised classes start close to calibrated
_SIGMA_BIAS_INIT = {
    "mv": math.log(math.expm1(0.6)),
    "nmv": math.log(math.expm1(0.3)),
    "ped": math.log(math.expm1(0.15)),
}


class DynamicsModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ad.ParameterStore()
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d = cfg.latent_dim
        p = self.params

        def linear(name, fan_in, fan_out, bias=True):
            p.add(f"{name}_w", _xavier(rng, fan_in, fan_out, (fan_in, fan_out)))
            if bias:
                p.add(f"{name}_b", np.zeros(fan_out))

        def layer_norm_params(name):
            p.add(f"{name}_g", np.ones(d))
            p.add(f"{name}_b", np.zeros(d))

        def attention(name):
            for proj in ("q", "k", "v", "o"):
                linear(f"{name}_{proj}", d, d)

        # agent encoder: bias-free state embedding keeps zero-padded frames
        # contributing exactly nothing to the pooled feature
        p.add("enc_state_w", _xavier(rng, 6, d, (6, d)))
        p.add("enc_pool_q", rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.t_hist, d)))
        linear("enc_attr", 6, d)
        layer_norm_params("enc_agent_ln")

        # context encoder
        linear("ctx_route", 5, d)
        linear("ctx_light", 5, d)
        layer_norm_params("ctx_ln")

        # dual-cross attention (context->agents pass, then agents->context pass)
        attention("dca_c2a")
        layer_norm_params("dca_c2a_ln")
        attention("dca_a2c")
        layer_norm_params("dca_a2c_ln")

        # agent-agent interaction transformer
        for i in range(cfg.interaction_layers):
            attention(f"self{i}")
            layer_norm_params(f"self{i}_ln1")
            linear(f"self{i}_ffn1", d, 2 * d)
            linear(f"self{i}_ffn2", 2 * d, d)
            layer_norm_params(f"self{i}_ln2")

        # per-category trajectory heads + shared transition head
        for kind in _KIND_NAMES:
            linear(f"head_{kind}_1", d, cfg.head_hidden)
            linear(f"head_{kind}_2", cfg.head_hidden, cfg.t_pred * 6)
            bias = p[f"head_{kind}_2_b"].data.reshape(cfg.t_pred, 6)
            bias[:, 2:4] = _SIGMA_BIAS_INIT[kind]
        # the transition decision rides on the refined features plus a direct
        # skip from the pivot kinematics (state, radius, radial speed): at
        # this learning rate the skip is what makes the rare leave/dropout
        # classes learnable
        linear("transition_1", d + 8, cfg.head_hidden)
        linear("transition_2", cfg.head_hidden, 3)

    def parameter_count(self) -> int:
        return self.params.total_count()

    # -- forward pieces -------------------------------------------------------

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return x @ self.params[f"{name}_w"] + self.params[f"{name}_b"]

    def _layer_norm(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}_g"], self.params[f"{name}_b"])

    def _attention(
        self, name: str, query: Tensor, keyval: Tensor, key_mask: np.ndarray | None = None
    ) -> Tensor:
        """Multi-head scaled dot-product attention, query rows over key rows."""
        cfg = self.config
        heads = cfg.attention_heads
        d = cfg.latent_dim
        dh = d // heads
        nq = query.shape[0]
        nk = keyval.shape[0]

        def split(t: Tensor, n: int) -> Tensor:
            return t.reshape((n, heads, dh)).transpose((1, 0, 2))

        q = split(self._linear(f"{name}_q", query), nq)
        k = split(self._linear(f"{name}_k", keyval), nk)
        v = split(self._linear(f"{name}_v", keyval), nk)
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            scores = scores + (key_mask - 1.0).reshape((1, 1, nk)) * 1e9
        attn = ad.softmax(scores, axis=-1)
        mixed = (attn @ v).transpose((1, 0, 2)).reshape((nq, d))
        return self._linear(f"{name}_o", mixed)

    def encode_agents(self, inputs: ModelInputs) -> Tensor:
        """(N, latent_dim) agent features: gated temporal pooling of per-frame
        state embeddings plus an embedded static-attribute vector."""
        n, t_hist, _ = inputs.hist.shape
        hist = ad.constant(inputs.hist * _STATE_SCALE)
        mask = ad.constant(inputs.hist_mask)
        embedded = hist @ self.params["enc_state_w"]  # (N, T, D)
        scores = (embedded * self.params["enc_pool_q"]).sum(axis=2)  # (N, T)
        gates = ad.sigmoid(scores) * mask
        pooled = (embedded * gates.reshape((n, t_hist, 1))).sum(axis=1)  # (N, D)
        attr = self._linear("enc_attr", ad.constant(inputs.attrs))
        return self._layer_norm("enc_agent_ln", pooled + attr)

    def encode_context(self, inputs: ModelInputs) -> Tensor:
        """(N_R + N_L, latent_dim) context rows: per-point route embeddings
        max-pooled per polyline, and per-frame light embeddings mean-pooled."""
        n_routes, max_pts, _ = inputs.routes.shape
        pts = ad.tanh(self._linear("ctx_route", ad.constant(inputs.routes * _ROUTE_SCALE)))
        pmask = inputs.route_mask[:, :, None]
        masked = pts * pmask + ad.constant((pmask - 1.0) * 1e30)
        route_rows = ad.max_along(masked, axis=1)  # (N_R, D)
        light_rows = ad.tanh(
            self._linear("ctx_light", ad.constant(inputs.lights * _LIGHT_SCALE))
        ).mean(axis=1)  # (N_L, D)
        ctx = ad.concatenate([route_rows, light_rows], axis=0)
        return self._layer_norm("ctx_ln", ctx)

    def dual_cross_attention(
        self, agent_feats: Tensor, ctx_feats: Tensor, agent_mask: np.ndarray | None = None
    ) -> Tensor:
        """Context rows attend to agents, then agents attend to the updated
        context. In "uni" mode only the second pass runs, over the raw
        context."""
        if self.config.attention_mode == "dual":
            ctx_feats = self._layer_norm(
                "dca_c2a_ln",
                ctx_feats + self._attention("dca_c2a", ctx_feats, agent_feats, agent_mask),
            )
        return self._layer_norm(
            "dca_a2c_ln", agent_feats + self._attention("dca_a2c", agent_feats, ctx_feats)
        )

    def interaction_transformer(
        self, x: Tensor, agent_mask: np.ndarray | None = None
    ) -> Tensor:
        for i in range(self.config.interaction_layers):
            x = self._layer_norm(
                f"self{i}_ln1", x + self._attention(f"self{i}", x, x, agent_mask)
            )
            hidden = self._linear(f"self{i}_ffn2", ad.tanh(self._linear(f"self{i}_ffn1", x)))
            x = self._layer_norm(f"self{i}_ln2", x + hidden)
        return x

    def prediction_heads(self, refined: Tensor, inputs: ModelInputs) -> PredictionTensors:
        cfg = self.config
        n = inputs.n_agents
        outs = []
        for ki, kind in enumerate(_KIND_NAMES):
            kind_mask = (inputs.kinds == ki).astype(np.float64).reshape((n, 1))
            hidden = ad.tanh(self._linear(f"head_{kind}_1", refined))
            outs.append(self._linear(f"head_{kind}_2", hidden) * kind_mask)
        raw = (outs[0] + outs[1] + outs[2]).reshape((n, cfg.t_pred, 6))
        # offsets decompose into a constant-velocity carry plus a learned
        # residual, so small network outputs already extrapolate sensibly;
        # the carry velocity averages the last three observed frames, which
        # damps finite-difference jitter when the model feeds on itself
        horizon = (np.arange(1, cfg.t_pred + 1) * FRAME_DT)[None, :, None]
        tail_mask = inputs.hist_mask[:, -3:, None]
        v_sum = (inputs.hist[:, -3:, 2:4] * tail_mask).sum(axis=1)
        v_carry = v_sum / np.maximum(tail_mask.sum(axis=1), 1.0)
        carry = inputs.pivot_pos[:, None, :] + v_carry[:, None, :] * horizon
        mu = raw[:, :, 0:2] * _RESIDUAL_SCALE + ad.constant(carry)
        sigma = ad.softplus(raw[:, :, 2:4]) * _SIGMA_SCALE + cfg.sigma_floor
        heading_vec = raw[:, :, 4:6]
        pivot = inputs.hist[:, -1, :]
        radius = np.hypot(pivot[:, 0], pivot[:, 1])
        radial_speed = (pivot[:, 0] * pivot[:, 2] + pivot[:, 1] * pivot[:, 3]) / np.maximum(radius, 1.0)
        skip = np.concatenate(
            [pivot * _STATE_SCALE, (radius * _POS_SCALE)[:, None], (radial_speed * _VEL_SCALE)[:, None]],
            axis=1,
        )
        trans_in = ad.concatenate([refined, ad.constant(skip)], axis=1)
        logits = self._linear("transition_2", ad.tanh(self._linear("transition_1", trans_in)))
        return PredictionTensors(inputs.agent_ids, mu, sigma, heading_vec, logits)

    def forward(
        self, inputs: ModelInputs, agent_mask: np.ndarray | None = None
    ) -> PredictionTensors:
        if inputs.n_agents < 1:
            raise ModelError("forward pass requires at least one agent")
        agent_feats = self.encode_agents(inputs)
        ctx_feats = self.encode_context(inputs)
        enhanced = self.dual_cross_attention(agent_feats, ctx_feats, agent_mask)
        refined = self.interaction_transformer(enhanced, agent_mask)
        return self.prediction_heads(refined, inputs)

    def predict(self, inputs: ModelInputs) -> PredictionOutput:
        pred = self.forward(inputs)
        return PredictionOutput(
            agent_ids=pred.agent_ids,
            mu=pred.mu.detach().copy(),
            sigma=pred.sigma.detach().copy(),
            heading_vec=pred.heading_vec.detach().copy(),
            transition_logits=pred.transition_logits.detach().copy(),
        )

    # -- loss and gradients ---------------------------------------------------

    def loss(self, pred: PredictionTensors, targets: Targets) -> LossTerms:
        cfg = self.config
        valid = targets.valid
        n_valid = float(valid.sum())
        if n_valid == 0.0:
            raise EmptyBatchError("no valid (agent, step) pairs in batch")
        vmask = ad.constant(valid)
        inv_count = 1.0 / n_valid

        diff = pred.mu - ad.constant(targets.positions)
        ratio = diff / pred.sigma
        nll = (
            (ratio * ratio).sum(axis=2) * 0.5
            + ad.log(pred.sigma).sum(axis=2)
            + LN_2PI
        )
        position = (nll * vmask).sum() * inv_count

        norm = ad.sqrt((pred.heading_vec * pred.heading_vec).sum(axis=2) + 1e-12)
        cos_delta = (pred.heading_vec * ad.constant(targets.headings)).sum(axis=2) / norm
        heading = ((1.0 - cos_delta) * vmask).sum() * (
            cfg.heading_loss_weight * inv_count
        )

        n = len(pred.agent_ids)
        onehot = np.zeros((n, 3))
        onehot[np.arange(n), targets.transition] = 1.0
        log_probs = ad.log_softmax(pred.transition_logits, axis=-1)
        transition = (log_probs * ad.constant(onehot)).sum() * (
            -cfg.transition_loss_weight / n
        )

        total = position + heading + transition
        return LossTerms(total, position, heading, transition)

    def gradients(
        self, inputs: ModelInputs, targets: Targets
    ) -> tuple[LossTerms, dict[str, np.ndarray]]:
        """Loss and exact reverse-mode gradients for one instance."""
        self.params.zero_grads()
        terms = self.loss(self.forward(inputs), targets)
        if not math.isfinite(terms.total.item()):
            raise GradientError("loss is not finite")
        terms.total.backward()
        grads = self.params.gradients()
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient in parameter {name!r}")
        return terms, grads
