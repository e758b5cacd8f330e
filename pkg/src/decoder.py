"""Autoregressive stroke decoder with a bivariate-normal mixture head.

Each step consumes [g_t, v_{t-1}] (context vector plus previous stroke-5
point) through a single LSTM cell and emits y_t = W_y h_t + b_y with the
layout

    [pi logits (M) | mu_x (M) | mu_y (M) | sigma_x raw (M) | sigma_y raw (M) | rho raw (M) | pen (3)]

The "l1" head replaces the mixture by a direct (dx, dy) regression and
emits [dx, dy | pen (3)].
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from src.attention import MultiScaleAttention
from src.config import TrainConfig
from src.errors import ConfigError, InvalidParams, ShapeError
from src.sketch_vector import START_TOKEN, SketchSequence
from src.state import DecoderState, FeaturePyramid


SIGMA_RAW_LIMIT = 10.0
RHO_LIMIT = 1.0 - 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmParams:
    """Mixture parameters, each tensor ... x M."""
    pi: torch.Tensor
    mu_x: torch.Tensor
    mu_y: torch.Tensor
    sigma_x: torch.Tensor
    sigma_y: torch.Tensor
    rho: torch.Tensor
    log_pi: Optional[torch.Tensor] = None

    @property
    def num_mixtures(self) -> int:
        return int(self.pi.shape[-1])

    def log_weights(self) -> torch.Tensor:
        if self.log_pi is not None:
            return self.log_pi
        return torch.log(self.pi.clamp_min(1e-12))

    def validate(self) -> None:
        """Raises InvalidParams unless pi is a simplex, sigma > 0 and |rho| < 1."""
        with torch.no_grad():
            tensors = (self.pi, self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.rho)
            if not all(bool(torch.isfinite(t).all()) for t in tensors):
                raise InvalidParams("Mixture parameters must be finite")
            tolerance = max(1e-6, 10 * self.num_mixtures * torch.finfo(self.pi.dtype).eps)
            if bool((self.pi < 0).any()) or bool(((self.pi.sum(-1) - 1.0).abs() > tolerance).any()):
                raise InvalidParams("Mixture weights must be non-negative and sum to 1")
            if bool((self.sigma_x <= 0).any()) or bool((self.sigma_y <= 0).any()):
                raise InvalidParams("Mixture scales must be positive")
            if bool((self.rho.abs() >= 1).any()):
                raise InvalidParams("Mixture correlations must lie in (-1, 1)")


@dataclass
class PenLogits:
    """Unnormalized pen-state scores (q1, q2, q3), ... x 3."""
    logits: torch.Tensor

    def probabilities(self, temperature: float = 1.0) -> torch.Tensor:
        return torch.softmax(self.logits / temperature, dim=-1)


def output_size(config: TrainConfig) -> int:
    if config.has("l1_regression"):
        return 5
    return 6 * config.M + 3


def split_output(y: torch.Tensor, M: int) -> Tuple[GmmParams, PenLogits]:
    """Split raw decoder outputs into mixture parameters and pen logits.

    sigma = exp(clamp(raw, -10, 10)); rho = tanh(raw) kept within
    1 - 1e-6 of +-1; pi = softmax(logits).

    Raises:
        ShapeError: last dimension differs from 6M + 3
    """
    if y.shape[-1] != 6 * M + 3:
        raise ShapeError("Decoder output has the wrong width", {"expected": 6 * M + 3, "got": y.shape[-1]})
    logits, mu_x, mu_y, sx, sy, rho, pen = torch.split(y, [M, M, M, M, M, M, 3], dim=-1)
    log_pi = torch.log_softmax(logits, dim=-1)
    params = GmmParams(
        pi=log_pi.exp(),
        mu_x=mu_x,
        mu_y=mu_y,
        sigma_x=torch.exp(sx.clamp(-SIGMA_RAW_LIMIT, SIGMA_RAW_LIMIT)),
        sigma_y=torch.exp(sy.clamp(-SIGMA_RAW_LIMIT, SIGMA_RAW_LIMIT)),
        rho=torch.tanh(rho).clamp(-RHO_LIMIT, RHO_LIMIT),
        log_pi=log_pi,
    )
    return params, PenLogits(pen)


def component_log_density(dx: torch.Tensor, dy: torch.Tensor, g: GmmParams) -> torch.Tensor:
    """log N(dx, dy | component j) for every component, ... x M."""
    dx = dx.unsqueeze(-1)
    dy = dy.unsqueeze(-1)
    zx = (dx - g.mu_x) / g.sigma_x
    zy = (dy - g.mu_y) / g.sigma_y
    one_minus = 1.0 - g.rho ** 2
    z = zx ** 2 + zy ** 2 - 2.0 * g.rho * zx * zy
    return (
        -LOG_2PI
        - torch.log(g.sigma_x)
        - torch.log(g.sigma_y)
        - 0.5 * torch.log(one_minus)
        - z / (2.0 * one_minus)
    )


def gmm_log_density(dx: torch.Tensor, dy: torch.Tensor, g: GmmParams, validate: bool = True) -> torch.Tensor:
    """log sum_j pi_j N(dx, dy | lambda_j) via log-sum-exp."""
    if validate:
        g.validate()
    return torch.logsumexp(g.log_weights() + component_log_density(dx, dy, g), dim=-1)


class SketchDecoder(nn.Module):
    """LSTM cell (input d + 5, hidden d_h) and output projection W_y, b_y."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.M = config.M
        self.head = "l1" if config.has("l1_regression") else "gmm"
        self.pen_inputs = not config.has("no_pen_state")
        self.cell = nn.LSTMCell(config.attention_size + 5, config.hidden_size)
        self.output = nn.Linear(config.hidden_size, output_size(config))

    def step(self, state: DecoderState, g: torch.Tensor, v_prev: torch.Tensor) -> Tuple[DecoderState, torch.Tensor]:
        if not self.pen_inputs:
            v_prev = torch.cat([v_prev[:, :2], torch.zeros_like(v_prev[:, 2:])], dim=-1)
        h, c = self.cell(torch.cat([g, v_prev], dim=-1), state.as_tuple())
        return DecoderState(h, c), self.output(h)

    def forward(self, state, g, v_prev):
        return self.step(state, g, v_prev)


def decoder_step(
    state: DecoderState, g: torch.Tensor, v_prev: torch.Tensor, decoder: SketchDecoder
) -> Tuple[DecoderState, torch.Tensor]:
    return decoder.step(state, g, v_prev)


def start_tokens(batch: int, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(START_TOKEN, dtype=like.dtype, device=like.device).expand(batch, 5)


def _one_hot_pen(index: torch.Tensor, dtype) -> torch.Tensor:
    return torch.nn.functional.one_hot(index, 3).to(dtype)


def sample_step(
    y: torch.Tensor,
    M: int,
    generator: Optional[torch.Generator] = None,
    temperature: float = 1.0,
    greedy: bool = False,
    head: str = "gmm",
    pen_state: bool = True,
) -> torch.Tensor:
    """Draw the next stroke-5 point (N x 5, one-hot pen) from raw outputs.

    The component is drawn from softmax(log pi / tau), the offset from that
    component with both scales multiplied by sqrt(tau), the pen state from
    softmax(q / tau). Greedy mode takes the most probable component's
    mean and the most probable pen state.
    """
    if temperature <= 0:
        raise ConfigError("Sampling temperature must be positive", {"temperature": temperature})
    n = y.shape[0]
    if head == "l1":
        offsets = y[:, :2]
        pen_logits = y[:, 2:5]
    else:
        g, pen = split_output(y, M)
        pen_logits = pen.logits
        if greedy:
            j = g.log_weights().argmax(dim=-1, keepdim=True)
        else:
            probs = torch.softmax(g.log_weights() / temperature, dim=-1)
            j = torch.multinomial(probs, 1, generator=generator)
        mu_x, mu_y = g.mu_x.gather(-1, j)[:, 0], g.mu_y.gather(-1, j)[:, 0]
        if greedy:
            offsets = torch.stack([mu_x, mu_y], dim=-1)
        else:
            sx = g.sigma_x.gather(-1, j)[:, 0] * math.sqrt(temperature)
            sy = g.sigma_y.gather(-1, j)[:, 0] * math.sqrt(temperature)
            rho = g.rho.gather(-1, j)[:, 0]
            z = torch.randn((n, 2), generator=generator, dtype=y.dtype, device=y.device)
            x = mu_x + sx * z[:, 0]
            yy = mu_y + sy * (rho * z[:, 0] + torch.sqrt(1.0 - rho ** 2) * z[:, 1])
            offsets = torch.stack([x, yy], dim=-1)

    if not pen_state:
        pen_index = torch.zeros(n, dtype=torch.long, device=y.device)
    elif greedy:
        pen_index = pen_logits.argmax(dim=-1)
    else:
        pen_probs = torch.softmax(pen_logits / temperature, dim=-1)
        pen_index = torch.multinomial(pen_probs, 1, generator=generator)[:, 0]
    return torch.cat([offsets, _one_hot_pen(pen_index, y.dtype)], dim=-1)


@dataclass
class Unroll:
    """Teacher-forced decoding of a batch.

    Attributes:
        outputs: N x T x out raw decoder outputs
        alphas: N x T x h x w attention maps
        mask: N x T validity (1 valid, 0 padding)
    """
    outputs: torch.Tensor
    alphas: torch.Tensor
    mask: torch.Tensor


@dataclass
class Generation:
    """Free-running decoding of a batch.

    Attributes:
        points: N x T x 5 sampled stroke-5 points
        alphas: N x T x h x w attention maps
        lengths: N executed steps per item
    """
    points: torch.Tensor
    alphas: torch.Tensor
    lengths: torch.Tensor

    @property
    def mask(self) -> torch.Tensor:
        steps = torch.arange(self.points.shape[1], device=self.points.device)
        return (steps[None, :] < self.lengths[:, None]).to(self.alphas.dtype)

    def sequences(self, scale_factor: float = 1.0, canvas=None) -> List[SketchSequence]:
        out = []
        points = self.points.detach().cpu().double().numpy()
        for i, length in enumerate(self.lengths.tolist()):
            out.append(SketchSequence(points[i, :length], canvas, scale_factor))
        return out


def unroll_teacher_forced(
    pyramid: FeaturePyramid,
    points: torch.Tensor,
    mask: torch.Tensor,
    initial: DecoderState,
    attention: MultiScaleAttention,
    decoder: SketchDecoder,
) -> Unroll:
    """Decode with ground-truth inputs: step t consumes point t-1 (start token at t=1).

    Steps where ``mask`` is 0 are still computed; consumers must exclude them.
    """
    n, steps, _ = points.shape
    projected = attention.project_pyramid(pyramid)
    inputs = torch.cat([start_tokens(n, points)[:, None], points[:, :-1]], dim=1)
    state = initial
    outputs, alphas = [], []
    for t in range(steps):
        alpha, g = attention(projected, state)
        state, y = decoder.step(state, g, inputs[:, t])
        outputs.append(y)
        alphas.append(alpha)
    return Unroll(torch.stack(outputs, dim=1), torch.stack(alphas, dim=1), mask)


def generate(
    pyramid: FeaturePyramid,
    initial: DecoderState,
    attention: MultiScaleAttention,
    decoder: SketchDecoder,
    generator: Optional[torch.Generator] = None,
    temperature: float = 0.4,
    T_max: int = 250,
    greedy: bool = False,
) -> Generation:
    """Free-running decoding, feeding back each sampled point.

    An item stops after its first sampled end-of-drawing state or at
    ``T_max``; the attention maps of its executed steps are returned.
    """
    n = pyramid.f_l.shape[0]
    projected = attention.project_pyramid(pyramid)
    state = initial
    v_prev = start_tokens(n, pyramid.f_l)
    finished = torch.zeros(n, dtype=torch.bool, device=pyramid.f_l.device)
    lengths = torch.zeros(n, dtype=torch.long, device=pyramid.f_l.device)
    points, alphas = [], []
    for _ in range(T_max):
        alpha, g = attention(projected, state)
        state, y = decoder.step(state, g, v_prev)
        v = sample_step(y, decoder.M, generator, temperature, greedy, decoder.head, decoder.pen_inputs)
        lengths = lengths + (~finished).long()
        points.append(v)
        alphas.append(alpha)
        finished = finished | (v[:, 4] == 1.0)
        v_prev = v
        if bool(finished.all()):
            break
    return Generation(torch.stack(points, dim=1), torch.stack(alphas, dim=1), lengths)
