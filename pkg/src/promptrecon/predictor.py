"""Two-view patch transformer with per-layer visual prompts.

Each image is cut into ``patch x patch`` tiles, embedded into D-wide tokens,
and run through ``depth`` pre-LN transformer layers.  Before layer i the
prompt block ``P[i]`` is stacked on top of the tokens and the corresponding
output rows are dropped afterwards.  A bidirectional cross-attention block lets
each view read the other, then two heads decode per-pixel ``(x, y, z, raw_c)``:
the self head for the query image, the cross head for the reference image's
pixels expressed in the query camera.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import CheckpointError, DimensionError, TrainingDivergenceError
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PRCKPT01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    H: int = 32
    W: int = 32
    patch: int = 4
    D: int = 64
    depth: int = 4  # encoder layers (N_e)
    heads: int = 4
    n_prompt: int = 8  # N_p
    feat_ch: int = 3
    ffn_mult: int = 2
    head_hidden: int = 64

    def __post_init__(self):
        if self.H % self.patch or self.W % self.patch:
            raise DimensionError(f"patch {self.patch} must divide {self.H}x{self.W}")
        if self.D % self.heads:
            raise DimensionError(f"D={self.D} not divisible by heads={self.heads}")
        if self.n_prompt < 0 or self.depth < 1:
            raise DimensionError("n_prompt must be >= 0 and depth >= 1")
        if self.D % 4:
            raise DimensionError("D must be a multiple of 4 for 2D positional encoding")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.patch, self.W // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def backbone_key(self) -> dict:
        """Fields that determine the backbone weight shapes (prompt length excluded)."""
        d = asdict(self)
        d.pop("n_prompt")
        return d


@dataclass
class PredictionPair:
    X_self: np.ndarray | Tensor  # (..., H, W, 3)
    X_cross: np.ndarray | Tensor
    C_self: np.ndarray | Tensor  # (..., H, W)
    C_cross: np.ndarray | Tensor

    def numpy(self) -> "PredictionPair":
        def arr(x):
            return x.data if isinstance(x, Tensor) else x

        return PredictionPair(arr(self.X_self), arr(self.X_cross), arr(self.C_self), arr(self.C_cross))


class PromptSet:
    """One ``(n_prompt, D)`` learnable block per encoder layer."""

    def __init__(self, layers: Iterable[np.ndarray]):
        self.layers = [Tensor(np.array(p, dtype=np.float64), requires_grad=True, name=f"prompt{i}") for i, p in enumerate(layers)]

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "PromptSet":
        return cls(np.zeros((cfg.n_prompt, cfg.D)) for _ in range(cfg.depth))

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i) -> Tensor:
        return self.layers[i]

    def arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.layers]

    def set_arrays(self, arrays) -> None:
        for p, a in zip(self.layers, arrays):
            p.data = np.array(a, dtype=np.float64)

    def copy(self) -> "PromptSet":
        return PromptSet(self.arrays())

    def check(self, cfg: ModelConfig) -> None:
        if len(self.layers) != cfg.depth:
            raise DimensionError(f"expected {cfg.depth} prompt blocks, got {len(self.layers)}")
        for p in self.layers:
            if p.shape != (cfg.n_prompt, cfg.D):
                raise DimensionError(f"prompt block shape {p.shape} != {(cfg.n_prompt, cfg.D)}")


def positional_encoding(cfg: ModelConfig) -> np.ndarray:
    """Fixed 2D sinusoidal terms, half the channels for rows and half for columns."""
    gh, gw = cfg.grid
    quarter = cfg.D // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    parts = []
    for coord in (rows, cols):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def patch_index(k: int, cfg: ModelConfig) -> tuple[int, int]:
    """Token index -> (patch row, patch col)."""
    return divmod(k, cfg.grid[1])


def patch_of(row: int, col: int, cfg: ModelConfig) -> int:
    return row * cfg.grid[1] + col


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, N_t, patch*patch*C), tokens in row-major patch order."""
    B = images.shape[0]
    gh, gw = cfg.grid
    p = cfg.patch
    x = images.reshape(B, gh, p, gw, p, -1).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, -1)


def unpatchify(x: Tensor, cfg: ModelConfig, ch: int) -> Tensor:
    B = x.shape[0]
    gh, gw = cfg.grid
    p = cfg.patch
    x = x.reshape(B, gh, gw, p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, cfg.H, cfg.W, ch)


def init_weights(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 3003])
    D, F = cfg.D, cfg.D * cfg.ffn_mult
    w: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out, gain=1.0):
        w[name + ".w"] = rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))
        w[name + ".b"] = np.zeros(n_out)

    def norm(name, dim):
        w[name + ".g"] = np.ones(dim)
        w[name + ".b"] = np.zeros(dim)

    dense("embed", cfg.patch * cfg.patch * cfg.feat_ch, D)
    for i in range(cfg.depth):
        pre = f"enc{i}"
        norm(pre + ".ln1", D)
        dense(pre + ".qkv", D, 3 * D)
        dense(pre + ".proj", D, D, gain=0.5)
        norm(pre + ".ln2", D)
        dense(pre + ".fc1", D, F)
        dense(pre + ".fc2", F, D, gain=0.5)
    norm("enc_out", D)
    norm("cross.ln_q", D)
    norm("cross.ln_kv", D)
    dense("cross.q", D, D)
    dense("cross.kv", D, 2 * D)
    dense("cross.proj", D, D, gain=0.5)
    norm("cross.ln2", D)
    dense("cross.fc1", D, F)
    dense("cross.fc2", F, D, gain=0.5)
    out = cfg.patch * cfg.patch * 4
    for head in ("head_self", "head_cross"):
        norm(head + ".ln", D)
        dense(head + ".fc1", D, cfg.head_hidden)
        dense(head + ".fc2", cfg.head_hidden, out, gain=0.1)
    return w


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, D = x.shape
    return x.reshape(B, N, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / np.sqrt(q.shape[-1])
    att = T.softmax_rows(T.matmul(q, k.transpose(0, 1, 3, 2)) * scale)
    return _merge_heads(T.matmul(att, v))


class Predictor:
    """The frozen two-view geometry network ``f_theta``."""

    def __init__(self, cfg: ModelConfig, weights: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        raw = weights if weights is not None else init_weights(cfg, seed)
        self.params = {k: Tensor(np.array(v, dtype=np.float64), name=k) for k, v in raw.items()}
        self.pos = positional_encoding(cfg)
        self.forward_count = 0

    # -- weight management
    def weights(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def freeze(self) -> None:
        self.set_trainable(False)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _dense(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self._p(name + ".w"), self._p(name + ".b"))

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self._p(name + ".g"), self._p(name + ".b"))

    # -- network pieces
    def embed_patches(self, images: np.ndarray) -> Tensor:
        """Token matrix ``E_0`` of shape (B, N_t, D); a single (H, W, C) image gets B = 1."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        cfg = self.cfg
        if images.shape[1:] != (cfg.H, cfg.W, cfg.feat_ch):
            raise DimensionError(f"image shape {images.shape[1:]} != {(cfg.H, cfg.W, cfg.feat_ch)}")
        tokens = self._dense(Tensor(patchify(images, cfg)), "embed")
        return tokens + self.pos

    def encoder_layer(self, x: Tensor, i: int) -> Tensor:
        pre = f"enc{i}"
        h = self._ln(x, pre + ".ln1")
        q, k, v = (T.getitem(self._dense(h, pre + ".qkv"), (Ellipsis, slice(j * self.cfg.D, (j + 1) * self.cfg.D))) for j in range(3))
        x = x + self._dense(attention(q, k, v, self.cfg.heads), pre + ".proj")
        h = self._ln(x, pre + ".ln2")
        return x + self._dense(T.gelu(self._dense(h, pre + ".fc1")), pre + ".fc2")

    def encode_with_prompts(self, tokens: Tensor, prompts: PromptSet | None) -> Tensor:
        """Run the encoder, stacking ``P[i]`` on top of the tokens before layer i and dropping those rows after."""
        if tokens.ndim == 2:
            tokens = tokens.reshape(1, *tokens.shape)
        if prompts is not None:
            prompts.check(self.cfg)
        x = tokens
        for i in range(self.cfg.depth):
            n_p = 0 if prompts is None else prompts[i].shape[0]
            if n_p:
                x = T.concat_tokens(prompts[i], x)
            x = self.encoder_layer(x, i)
            x = T.drop_prompt_rows(x, n_p)
        return x

    def cross_block(self, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
        D = self.cfg.D
        qa = self._dense(self._ln(a, "cross.ln_q"), "cross.q")
        qb = self._dense(self._ln(b, "cross.ln_q"), "cross.q")
        kva = self._dense(self._ln(a, "cross.ln_kv"), "cross.kv")
        kvb = self._dense(self._ln(b, "cross.ln_kv"), "cross.kv")

        def kv(t):
            return T.getitem(t, (Ellipsis, slice(0, D))), T.getitem(t, (Ellipsis, slice(D, 2 * D)))

        ka, va = kv(kva)
        kb, vb = kv(kvb)
        a2 = a + self._dense(attention(qa, kb, vb, self.cfg.heads), "cross.proj")
        b2 = b + self._dense(attention(qb, ka, va, self.cfg.heads), "cross.proj")
        out = []
        for x in (a2, b2):
            h = self._ln(x, "cross.ln2")
            out.append(x + self._dense(T.gelu(self._dense(h, "cross.fc1")), "cross.fc2"))
        return out[0], out[1]

    def _decode(self, x: Tensor, head: str) -> tuple[Tensor, Tensor]:
        h = T.gelu(self._dense(self._ln(x, head + ".ln"), head + ".fc1"))
        out = unpatchify(self._dense(h, head + ".fc2"), self.cfg, 4)
        xyz = T.getitem(out, (Ellipsis, slice(0, 3)))
        raw = T.getitem(out, (Ellipsis, 3))
        conf = T.exp(raw) + 1.0
        return xyz, conf

    def forward_pair(self, I: np.ndarray, K: np.ndarray, prompts: PromptSet | None = None) -> PredictionPair:
        """Pointmaps/confidences for ``I`` in its own frame and for ``K``'s pixels in ``I``'s frame.

        Inputs are single images (H, W, C) or batches (B, H, W, C).  Both views
        are encoded with the same prompt set.
        """
        self.forward_count += 1
        I = np.asarray(I, dtype=np.float64)
        K = np.asarray(K, dtype=np.float64)
        single = I.ndim == 3
        if single:
            I, K = I[None], K[None]
        if I.shape != K.shape:
            raise DimensionError(f"pair shapes differ: {I.shape} vs {K.shape}")
        B = I.shape[0]
        tokens = self.embed_patches(np.concatenate([I, K], axis=0))
        enc = self._ln(self.encode_with_prompts(tokens, prompts), "enc_out")
        ta = T.getitem(enc, slice(0, B))
        tb = T.getitem(enc, slice(B, 2 * B))
        ta, tb = self.cross_block(ta, tb)
        xs, cs = self._decode(ta, "head_self")
        xc, cc = self._decode(tb, "head_cross")
        if single:
            xs, cs, xc, cc = (t[0] for t in (xs, cs, xc, cc))
        return PredictionPair(xs, xc, cs, cc)

    def predict(self, I, K, prompts: PromptSet | None = None) -> PredictionPair:
        """Gradient-free ``forward_pair`` returning numpy arrays."""
        with T.no_grad():
            return self.forward_pair(I, K, prompts).numpy()


# ---------------------------------------------------------------- pretraining


def regression_loss(pred_X: Tensor, pred_C: Tensor, gt: np.ndarray, alpha: float) -> Tensor:
    """Mean over pixels of ``C * ||X - GT|| - alpha * log C``."""
    diff = pred_X - gt
    dist = T.sqrt((diff * diff).sum(axis=-1) + 1e-12)
    return (pred_C * dist - alpha * T.log(pred_C)).mean()


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch: int = 8
    lr: float = 1e-3
    lr_min: float = 5e-5
    warmup: int = 100
    weight_decay: float = 1e-4
    alpha: float = 0.2
    n_scenes: int = 24
    frames_per_scene: int = 120
    max_gap: int = 12
    seed: int = 0


@dataclass
class PretrainLog:
    losses: list[float] = field(default_factory=list)


def sample_training_pairs(cfg: ModelConfig, pcfg: PretrainConfig, family: str = "base"):
    """Image pairs and their exact self/cross pointmaps from the given scene family."""
    from .world import Intrinsics, cross_pointmap, generate_scene, make_stream, pretrain_trajectory

    intr = Intrinsics(cfg.H, cfg.W)
    rng = np.random.default_rng([pcfg.seed, 4004])
    streams = []
    for k in range(pcfg.n_scenes):
        scene_seed = 100_000 + pcfg.seed * 1000 + k
        scene = generate_scene(scene_seed, family)
        streams.append(make_stream(scene, pretrain_trajectory(scene_seed, pcfg.frames_per_scene), intr))

    def draw(n):
        I, K, Gs, Gc = [], [], [], []
        for _ in range(n):
            frames = streams[rng.integers(len(streams))]
            i = int(rng.integers(len(frames)))
            gap = int(rng.integers(0, pcfg.max_gap + 1))
            j = int(np.clip(i + (gap if rng.random() < 0.5 else -gap), 0, len(frames) - 1))
            a, b = frames[i], frames[j]
            I.append(a.image)
            K.append(b.image)
            Gs.append(a.gt_pointmap)
            Gc.append(cross_pointmap(b, a))
        return np.array(I), np.array(K), np.array(Gs), np.array(Gc)

    return draw


def pretrain(
    predictor: Predictor,
    pcfg: PretrainConfig,
    family: str = "base",
    log_every: int = 100,
) -> PretrainLog:
    """Fit the backbone to exact pointmaps with a confidence-weighted regression loss, then freeze it."""
    from .optim import AdamW

    log = PretrainLog()
    if pcfg.steps == 0:
        predictor.freeze()
        return log
    draw = sample_training_pairs(predictor.cfg, pcfg, family)
    predictor.set_trainable(True)
    params = list(predictor.params.values())
    opt = AdamW(params, lr=pcfg.lr, weight_decay=pcfg.weight_decay)
    # train with the zero prompt rows present so that untuned inference matches training
    frozen_prompts = PromptSet.zeros(predictor.cfg)
    for step in range(pcfg.steps):
        if step < pcfg.warmup:
            opt.lr = pcfg.lr * (step + 1) / pcfg.warmup
        else:
            frac = (step - pcfg.warmup) / max(1, pcfg.steps - pcfg.warmup)
            opt.lr = pcfg.lr_min + 0.5 * (pcfg.lr - pcfg.lr_min) * (1 + np.cos(np.pi * frac))
        I, K, Gs, Gc = draw(pcfg.batch)
        pred = predictor.forward_pair(I, K, frozen_prompts)
        loss = regression_loss(pred.X_self, pred.C_self, Gs, pcfg.alpha) + regression_loss(
            pred.X_cross, pred.C_cross, Gc, pcfg.alpha
        )
        value = loss.item()
        if not np.isfinite(value):
            predictor.freeze()
            raise TrainingDivergenceError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad()
        T.backward(loss, params)
        opt.step()
        log.losses.append(value)
        if log_every and step % log_every == 0:
            logger.info("pretrain step %d loss %.4f", step, value)
    predictor.freeze()
    return log


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, predictor: Predictor, extra: dict | None = None) -> str:
    """Write config + named float64 arrays; returns the file's sha256.

    Layout: magic, u32 version, u32 header length, JSON header, raw
    little-endian float64 payload.  Identical weights give identical bytes.
    """
    names = sorted(predictor.params)
    entries, offset = [], 0
    for n in names:
        arr = predictor.params[n].data
        entries.append({"name": n, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = json.dumps(
        {"config": asdict(predictor.cfg), "arrays": entries, "extra": extra or {}},
        sort_keys=True,
    ).encode()
    payload = b"".join(np.ascontiguousarray(predictor.params[n].data, dtype="<f8").tobytes() for n in names)
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + payload
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[Predictor, dict]:
    """Read a checkpoint; if ``cfg`` is given its backbone fields must match the stored ones."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(blob[start : start + hlen])
    stored = ModelConfig(**header["config"])
    if cfg is not None and cfg.backbone_key() != stored.backbone_key():
        raise CheckpointError(f"checkpoint config {stored} incompatible with {cfg}")
    data = np.frombuffer(blob, dtype="<f8", offset=start + hlen)
    weights = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        weights[e["name"]] = data[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    predictor = Predictor(cfg or stored, weights)
    return predictor, header.get("extra", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
