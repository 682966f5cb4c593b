"""Online prompt tuning triggered by keyframe creation.

Each update runs three forward passes with the current prompts: the previous
keyframe against the new one (local term, compared with the previous
keyframe's fused map) and the new keyframe against two sampled historical
keyframes (global term, the two predictions compared with each other).  The
weighted sum is backpropagated to the prompts only and one AdamW step is taken
per iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InsufficientHistoryError, TrainingDivergenceError
from .frontend import Keyframe, KeyframeBuffer
from .optim import AdamW
from .predictor import Predictor, PromptSet
from .tensor import Tensor

logger = logging.getLogger(__name__)


def _l1_sum(a, b) -> Tensor:
    return T.tabs(T.sub(a, b)).sum()


def local_loss(X_fused, X_pred) -> Tensor:
    """Sum over pixels of the L1 distance between the fused map and a fresh prediction."""
    return _l1_sum(X_fused, X_pred)


def global_loss(X_pred_1, X_pred_2) -> Tensor:
    """Sum over pixels of the L1 distance between two predictions of the same keyframe."""
    return _l1_sum(X_pred_1, X_pred_2)


def total_loss(l_local, l_global, lam: float):
    return lam * l_local + (1.0 - lam) * l_global


def sample_history(buffer: KeyframeBuffer, exclude: int, rng: np.random.Generator | None = None) -> tuple[Keyframe, Keyframe]:
    """Two distinct keyframes older than ``exclude``, drawn uniformly without replacement."""
    rng = buffer.rng if rng is None else rng
    candidates = [kf for kf in buffer if kf.id < exclude]
    if len(candidates) < 2:
        raise InsufficientHistoryError(f"{len(candidates)} historical keyframe(s) before {exclude}")
    i, j = rng.choice(len(candidates), size=2, replace=False)
    return candidates[int(i)], candidates[int(j)]


@dataclass
class TunerConfig:
    lam: float = 0.5
    lr: float = 1e-4
    iters_per_keyframe: int = 1
    rng_seed: int = 0
    enable_local: bool = True
    enable_global: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    confidence_mask: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.iters_per_keyframe < 1:
            raise ValueError("iters_per_keyframe must be >= 1")


@dataclass
class UpdateRecord:
    update_idx: int
    keyframe_id: int
    L_local: float
    L_global: float
    L_total: float


@dataclass
class TunerState:
    prompts: PromptSet
    optimizer: AdamW
    updates: int = 0
    log: list[UpdateRecord] = field(default_factory=list)


class PromptTuner:
    """Owns the prompt set and its optimizer; call :meth:`on_new_keyframe` from the tracker."""

    def __init__(self, predictor: Predictor, config: TunerConfig | None = None, prompts: PromptSet | None = None):
        self.predictor = predictor
        self.config = config or TunerConfig()
        prompts = prompts if prompts is not None else PromptSet.zeros(predictor.cfg)
        prompts.check(predictor.cfg)
        c = self.config
        opt = AdamW(list(prompts), lr=c.lr, beta1=c.beta1, beta2=c.beta2, eps=c.eps, weight_decay=c.weight_decay)
        self.state = TunerState(prompts, opt)

    @property
    def prompts(self) -> PromptSet:
        return self.state.prompts

    @property
    def active(self) -> bool:
        return self.config.enable_local or self.config.enable_global

    def _mask(self, conf):
        if not self.config.confidence_mask:
            return None
        return (conf.data > np.median(conf.data))[..., None]

    def losses(self, kf_new: Keyframe, kf_prev: Keyframe, history: tuple[Keyframe, Keyframe] | None):
        """Build (L_local, L_global, L_total) on the tape for the current prompts.

        Exactly one forward pass per active local term and two per global term.
        """
        c = self.config
        P = self.state.prompts
        l_local = l_global = None
        if c.enable_local:
            pred = self.predictor.forward_pair(kf_prev.image, kf_new.image, P)
            X = pred.X_self
            mask = self._mask(pred.C_self)
            target = kf_prev.X_canon
            if mask is not None:
                X, target = X * mask, target * mask
            l_local = local_loss(target, X)
        if c.enable_global and history is not None:
            h1, h2 = history
            p1 = self.predictor.forward_pair(kf_new.image, h1.image, P)
            p2 = self.predictor.forward_pair(kf_new.image, h2.image, P)
            l_global = global_loss(p1.X_self, p2.X_self)

        if l_local is not None and l_global is not None:
            l_total = total_loss(l_local, l_global, c.lam)
        else:
            l_total = l_local if l_local is not None else l_global
        return l_local, l_global, l_total

    def on_new_keyframe(self, kf_new: Keyframe, kf_prev: Keyframe, buffer: KeyframeBuffer) -> UpdateRecord | None:
        """Run ``iters_per_keyframe`` prompt updates; returns the last logged record."""
        if not self.active:
            return None
        c = self.config
        history = None
        try:
            # every mode waits until two historical keyframes exist, so all variants update equally often
            if c.enable_global:
                history = sample_history(buffer, kf_new.id)
            elif sum(kf.id < kf_new.id for kf in buffer) < 2:
                raise InsufficientHistoryError(f"fewer than two keyframes before {kf_new.id}")
        except InsufficientHistoryError:
            logger.info("keyframe %d: insufficient history, update skipped", kf_new.id)
            return None

        record = None
        params = list(self.state.prompts)
        snapshot = self.state.prompts.arrays()
        for _ in range(c.iters_per_keyframe):
            l_local, l_global, l_total = self.losses(kf_new, kf_prev, history)
            value = l_total.item()
            if not np.isfinite(value):
                self.state.prompts.set_arrays(snapshot)
                raise TrainingDivergenceError(f"non-finite tuning loss at keyframe {kf_new.id}")
            self.state.optimizer.zero_grad()
            T.backward(l_total, params)
            self.state.optimizer.step()
            record = UpdateRecord(
                self.state.updates,
                kf_new.id,
                l_local.item() if l_local is not None else float("nan"),
                l_global.item() if l_global is not None else float("nan"),
                value,
            )
            self.state.log.append(record)
            self.state.updates += 1
        return record

    def __call__(self, kf_new: Keyframe, kf_prev: Keyframe, buffer: KeyframeBuffer) -> None:
        self.on_new_keyframe(kf_new, kf_prev, buffer)
