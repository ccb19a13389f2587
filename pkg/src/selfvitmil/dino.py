"""Self-distillation pre-training (student/teacher with EMA, centering, sharpening)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, ImageFilter

from . import tensor as T
from .tensor import ParameterError, Tensor, UsageError
from .vit import ViTConfig, ViTModel, _trunc_normal, forward, prepare_images

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class DinoConfig:
    out_dim: int = 128
    head_hidden: int = 64
    head_bottleneck: int = 32
    student_temp: float = 0.1
    teacher_temp_warmup: float = 0.01
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    centering: bool = True
    n_local: int = 4
    global_scale: tuple = (0.4, 1.0)
    local_scale: tuple = (0.05, 0.4)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.3
    blur_prob: float = 0.3
    lr_min: float = 1e-6
    lr_max: float = 5e-4
    ema_start: float = 0.9995
    weight_decay: float = 0.04
    clip_grad: float = 3.0
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_scale"], d["local_scale"] = list(self.global_scale), list(self.local_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DinoConfig":
        d = dict(d)
        for k in ("global_scale", "local_scale"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# -- schedules --------------------------------------------------------------

def lr_at(step: int, total_steps: int, warmup_steps: int, lr_min: float, lr_max: float) -> float:
    """Linear warm-up from ``lr_min`` to ``lr_max``, then a cosine half-period back to ``lr_min``."""
    if not 0 <= warmup_steps <= total_steps:
        raise ParameterError(f"need 0 <= warmup ({warmup_steps}) <= total ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        return lr_max if warmup_steps == 0 else lr_min + (lr_max - lr_min) * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def teacher_temp_at(step: int, warmup_steps: int, warmup_value: float = 0.01,
                    final_value: float = 0.04) -> float:
    """Two-phase teacher temperature: ``warmup_value`` during warm-up, ``final_value`` after."""
    return warmup_value if step < warmup_steps else final_value


def ema_at(step: int, total_steps: int, start: float = 0.9995) -> float:
    """Teacher momentum, cosine ramp from ``start`` at step 0 to 1 at ``total_steps``."""
    if total_steps <= 0:
        return 1.0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 - (1.0 - start) * (math.cos(math.pi * frac) + 1.0) / 2.0


# -- views ------------------------------------------------------------------

@dataclass
class View:
    pixels: np.ndarray  # uint8 H x W x 3
    kind: str  # "global" | "local"


@dataclass
class ViewSet:
    global_views: list
    local_views: list
    source_id: str = ""

    def __post_init__(self):
        if len(self.global_views) != 2:
            raise ValueError(f"a view set holds exactly 2 global views, got {len(self.global_views)}")

    @property
    def views(self) -> list:
        return list(self.global_views) + list(self.local_views)

    def __len__(self) -> int:
        return 2 + len(self.local_views)

    def tobytes(self) -> bytes:
        return b"".join(v.pixels.tobytes() for v in self.views)


def _random_resized_crop(img: Image.Image, rng, scale, out_size: int) -> Image.Image:
    w, h = img.size
    area = w * h
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            break
    else:
        side = min(w, h)
        cw = ch = side
        x0, y0 = (w - side) // 2, (h - side) // 2
    return img.resize((out_size, out_size), Image.BILINEAR, box=(x0, y0, x0 + cw, y0 + ch))


def _color_jitter(arr: np.ndarray, rng, strength: float) -> np.ndarray:
    x = arr.astype(np.float64)
    x *= rng.uniform(1 - strength, 1 + strength)  # brightness
    mean = x.mean()
    x = (x - mean) * rng.uniform(1 - strength, 1 + strength) + mean  # contrast
    gray = (x @ np.array([0.299, 0.587, 0.114]))[..., None]
    x = (x - gray) * rng.uniform(1 - strength, 1 + strength) + gray  # saturation
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _augment(img: Image.Image, rng, cfg: DinoConfig, scale, out_size: int) -> np.ndarray:
    crop = _random_resized_crop(img, rng, scale, out_size)
    if rng.random() < cfg.flip_prob:
        crop = crop.transpose(Image.FLIP_LEFT_RIGHT)
    if rng.random() < cfg.blur_prob:
        crop = crop.filter(ImageFilter.GaussianBlur(radius=float(rng.uniform(0.1, 1.0))))
    arr = np.asarray(crop, dtype=np.uint8)
    if rng.random() < cfg.jitter_prob:
        arr = _color_jitter(arr, rng, cfg.jitter_strength)
    return arr


def make_views(image: np.ndarray, seed, cfg: DinoConfig, out_size: int | None = None,
               source_id: str = "") -> ViewSet:
    """Two global and ``cfg.n_local`` local augmented crops, all resized to ``out_size``."""
    image = np.asarray(image, dtype=np.uint8)
    out_size = out_size or image.shape[0]
    rng = np.random.default_rng(seed)
    img = Image.fromarray(image)
    g = [View(_augment(img, rng, cfg, cfg.global_scale, out_size), "global") for _ in range(2)]
    loc = [View(_augment(img, rng, cfg, cfg.local_scale, out_size), "local") for _ in range(cfg.n_local)]
    return ViewSet(g, loc, source_id)


# -- networks ---------------------------------------------------------------

class ProjectionHead:
    """Three-layer GELU MLP (hidden, hidden, bottleneck), then a bias-free map to ``out_dim``.

    Weights use fan-in scaling so logits start at unit scale.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @classmethod
    def init(cls, in_dim: int, cfg: DinoConfig, seed: int = 0) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        dims = [in_dim, cfg.head_hidden, cfg.head_hidden, cfg.head_bottleneck]
        p = {}
        for i in range(3):
            p[f"head.w{i}"] = _trunc_normal(rng, (dims[i], dims[i + 1]), 1 / math.sqrt(dims[i]))
            p[f"head.b{i}"] = np.zeros(dims[i + 1])
        p["head.last"] = _trunc_normal(rng, (cfg.head_bottleneck, cfg.out_dim),
                                       1 / math.sqrt(cfg.head_bottleneck))
        return cls({k: Tensor(v, requires_grad=True) for k, v in p.items()})

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        for i in range(3):
            x = T.matmul(x, p[f"head.w{i}"]) + p[f"head.b{i}"]
            if i < 2:
                x = T.gelu(x)
        return T.matmul(x, p["head.last"])

    @property
    def out_dim(self) -> int:
        return self.params["head.last"].shape[1]


@dataclass
class Network:
    backbone: ViTModel
    head: ProjectionHead

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + list(self.head.params.values())

    def named(self) -> dict[str, Tensor]:
        return {**self.backbone.params, **self.head.params}

    def __call__(self, images: np.ndarray) -> Tensor:
        cls = forward(images, self.backbone)  # B x L x D
        return self.head(cls[:, -1, :])

    def copy(self, requires_grad: bool) -> "Network":
        return Network(self.backbone.copy(requires_grad),
                       ProjectionHead({k: Tensor(v.data.copy(), requires_grad=requires_grad)
                                       for k, v in self.head.params.items()}))


@dataclass
class DinoState:
    student: Network
    teacher: Network
    center: np.ndarray
    cfg: DinoConfig
    step: int = 0
    total_steps: int = 1
    warmup_steps: int = 0
    optimizer: T.AdamW | None = None
    trace: list = field(default_factory=list)

    @classmethod
    def init(cls, vit_cfg: ViTConfig, cfg: DinoConfig, seed: int = 0, total_steps: int = 1,
             warmup_steps: int = 0) -> "DinoState":
        student = Network(ViTModel.init(vit_cfg, seed), ProjectionHead.init(vit_cfg.embed_dim, cfg, seed + 1))
        teacher = student.copy(requires_grad=False)
        opt = T.AdamW(student.parameters(), lr=cfg.lr_min, weight_decay=cfg.weight_decay)
        return cls(student, teacher, np.zeros(cfg.out_dim), cfg, 0, total_steps, warmup_steps, opt)

    @property
    def tau_t(self) -> float:
        return teacher_temp_at(self.step, self.warmup_steps, self.cfg.teacher_temp_warmup,
                               self.cfg.teacher_temp)

    @property
    def lam(self) -> float:
        return ema_at(self.step, self.total_steps, self.cfg.ema_start)

    @property
    def lr(self) -> float:
        return lr_at(min(self.step, self.total_steps), self.total_steps, self.warmup_steps,
                     self.cfg.lr_min, self.cfg.lr_max)


def _as_batch(views) -> np.ndarray:
    if isinstance(views, View):
        views = [views]
    return prepare_images(np.stack([v.pixels for v in views]))


def teacher_logits(views, state: DinoState) -> np.ndarray:
    views = [views] if isinstance(views, View) else list(views)
    if any(v.kind != "global" for v in views):
        raise UsageError("the teacher only sees global views")
    with T.no_grad():
        return state.teacher(_as_batch(views)).data


def centered_softmax(logits: np.ndarray, center: np.ndarray, tau: float) -> np.ndarray:
    z = (logits - center) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def teacher_distribution(view, state: DinoState) -> np.ndarray:
    """Centered, sharpened teacher probabilities; no graph is recorded."""
    center = state.center if state.cfg.centering else 0.0
    p = centered_softmax(teacher_logits(view, state), center, state.tau_t)
    return p[0] if isinstance(view, View) else p


def distillation_loss(teacher_probs: list, student_logits: list, student_temp: float) -> Tensor:
    """Mean cross-entropy over (teacher view t, student view s != t) pairs and the batch.

    ``teacher_probs[i]`` (B x K arrays) belongs to view ``i``; the student
    list covers all views with the global ones first.
    """
    terms = []
    for ti, tp in enumerate(teacher_probs):
        target = Tensor(tp)
        for si, logits in enumerate(student_logits):
            if si == ti:
                continue
            logp = T.log_softmax(logits, student_temp)
            terms.append(T.mean(T.tsum(target * logp, axis=-1)))
    return T.neg(T.concat([T.reshape(t, (1,)) for t in terms]).mean())


def dino_loss(views, state: DinoState) -> Tensor:
    """Distillation loss for one :class:`ViewSet` or a list of them (gradient reaches the student only)."""
    sets = [views] if isinstance(views, ViewSet) else list(views)
    n_views = len(sets[0])
    per_view = [[vs.views[i] for vs in sets] for i in range(n_views)]
    teacher_probs = [teacher_distribution(per_view[i], state) for i in range(2)]
    b = len(sets)
    student_out = state.student(np.concatenate([_as_batch(v) for v in per_view], axis=0))
    student_logits = [student_out[i * b:(i + 1) * b] for i in range(n_views)]
    return distillation_loss(teacher_probs, student_logits, state.cfg.student_temp)


def ema_update(state: DinoState, lam: float | None = None) -> DinoState:
    lam = state.lam if lam is None else lam
    for t, s in zip(state.teacher.parameters(), state.student.parameters()):
        if t.shape != s.shape:
            raise ValueError(f"teacher/student shape mismatch {t.shape} vs {s.shape}")
        t.data *= lam
        t.data += (1.0 - lam) * s.data
    return state


def update_center(state: DinoState, teacher_outputs: np.ndarray, momentum: float | None = None) -> np.ndarray:
    batch = np.asarray(teacher_outputs, dtype=float).reshape(-1, state.center.shape[0])
    if len(batch) == 0:
        raise ValueError("empty batch")
    m = state.cfg.center_momentum if momentum is None else momentum
    state.center = m * state.center + (1.0 - m) * batch.mean(axis=0)
    return state.center


def entropy(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)


def _clip_gradients(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


def train_step(state: DinoState, batch_views: list) -> dict:
    """One optimisation step on a batch of view sets."""
    cfg = state.cfg
    n_views = len(batch_views[0])
    b = len(batch_views)
    per_view = [[vs.views[i] for vs in batch_views] for i in range(n_views)]
    lr, tau, lam = state.lr, state.tau_t, state.lam

    t_logits = [teacher_logits(per_view[i], state) for i in range(2)]
    center = state.center if cfg.centering else 0.0
    t_probs = [centered_softmax(t, center, tau) for t in t_logits]
    student_out = state.student(np.concatenate([_as_batch(v) for v in per_view], axis=0))
    loss = distillation_loss(t_probs, [student_out[i * b:(i + 1) * b] for i in range(n_views)],
                             cfg.student_temp)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite DINO loss at step {state.step}")
    state.optimizer.zero_grad()
    loss.backward()
    _clip_gradients(state.optimizer.params, cfg.clip_grad)
    state.optimizer.step(lr)
    ema_update(state, lam)
    both = np.concatenate(t_logits, axis=0)
    if cfg.centering:
        update_center(state, both)
    probs = np.concatenate(t_probs, axis=0)
    record = {
        "step": state.step,
        "loss": value,
        "teacher_entropy": float(entropy(probs).mean()),
        "lr": lr,
        "tau_t": tau,
        "lambda": lam,
    }
    state.step += 1
    state.trace.append(record)
    return record


def pretrain(tiles, vit_cfg: ViTConfig, cfg: DinoConfig, seed: int, progress=None) -> DinoState:
    """Self-distillation over a list of uint8 tiles; the teacher is the product."""
    tiles = list(tiles)
    if not tiles:
        raise ValueError("pretrain needs at least one tile")
    bs = min(cfg.batch_size, len(tiles))
    steps_per_epoch = max(1, len(tiles) // bs)
    total = steps_per_epoch * cfg.epochs
    state = DinoState.init(vit_cfg, cfg, seed, total, steps_per_epoch * cfg.warmup_epochs)
    rng = np.random.default_rng(seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tiles))
        for k in range(steps_per_epoch):
            idx = order[k * bs:(k + 1) * bs]
            views = [make_views(tiles[i], [seed, state.step, int(i)], cfg, vit_cfg.image_size)
                     for i in idx]
            rec = train_step(state, views)
            rec["epoch"] = epoch
        if progress:
            progress(epoch, state.trace[-1])
        logger.info("epoch %d loss %.4f entropy %.4f", epoch, state.trace[-1]["loss"],
                    state.trace[-1]["teacher_entropy"])
    return state
