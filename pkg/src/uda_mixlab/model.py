"""Miniature stride-8 segmentation network with an EMA teacher.

The student M = G(E(x)) is a small conv encoder (three stride-2 stages plus
two residual blocks) followed by a 1x1 classifier; logits are bilinearly
upsampled to input resolution before the softmax. GELU keeps the network
smooth, which keeps finite-difference gradient checks tight.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from uda_mixlab.synthgen import STRIDE

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture hyperparameters: output classes, feature width D, stem widths."""

    class_count: int
    feature_width: int = 32
    stem_widths: tuple[int, int] = (16, 24)

    def __post_init__(self) -> None:
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.feature_width < 1 or any(w < 1 for w in self.stem_widths):
            raise ValueError("channel widths must be positive")


class _ResidualBlock(nn.Module):
    def __init__(self, width: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(width, width, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(x + self.conv2(F.gelu(self.conv1(x))))


class SegModel(nn.Module):
    """Encoder E (total stride 8, width D) plus 1x1 classifier G."""

    def __init__(self, arch: ArchSpec) -> None:
        super().__init__()
        self.arch = arch
        w1, w2 = arch.stem_widths
        d = arch.feature_width
        self.stem1 = nn.Conv2d(3, w1, kernel_size=3, stride=2, padding=1)
        self.stem2 = nn.Conv2d(w1, w2, kernel_size=3, stride=2, padding=1)
        self.stem3 = nn.Conv2d(w2, d, kernel_size=3, stride=2, padding=1)
        self.block1 = _ResidualBlock(d)
        self.block2 = _ResidualBlock(d)
        self.classifier = nn.Conv2d(d, arch.class_count, kernel_size=1)

    @property
    def dtype(self) -> torch.dtype:
        return self.classifier.weight.dtype

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.stem1(x))
        x = F.gelu(self.stem2(x))
        x = F.gelu(self.stem3(x))
        x = self.block1(x)
        return self.block2(x)

    def head_weights(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Classifier as a (C, D) weight matrix and (C,) bias vector."""
        c, d = self.arch.class_count, self.arch.feature_width
        return self.classifier.weight.view(c, d), self.classifier.bias

    def _to_input(self, image: np.ndarray | torch.Tensor) -> torch.Tensor:
        if isinstance(image, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(image))
        else:
            x = image
        if x.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {tuple(x.shape)}")
        h, w = int(x.shape[0]), int(x.shape[1])
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"image dims must be multiples of {STRIDE}, got {h}x{w}")
        # Center [0, 1] inputs to [-1, 1]; without norm layers this keeps
        # activation scale through the stack.
        x = x.to(self.dtype) * 2.0 - 1.0
        return x.permute(2, 0, 1).unsqueeze(0)

    def forward(self, image: np.ndarray | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (features (h, w, D), probs (C, H, W)); h = H/8, w = W/8."""
        x = self._to_input(image)
        h, w = x.shape[2], x.shape[3]
        feats = self.encode(x)
        logits = self.classifier(feats)
        logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        probs = torch.softmax(logits, dim=1)[0]
        return feats[0].permute(1, 2, 0), probs

    def predict_labels(self, image: np.ndarray | torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            _, probs = self(image)
        return probs.argmax(dim=0).to(torch.int32).numpy()


def init_params(
    seed: int,
    arch: ArchSpec,
    zero_init: bool = False,
    dtype: torch.dtype = torch.float32,
) -> SegModel:
    """Fan-in scaled uniform init (He gain) with zero biases, seeded privately.

    zero_init gives an all-zero network (test mode): forward then yields exactly
    uniform class probabilities everywhere.
    """
    model = SegModel(arch).to(dtype)
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                if zero_init:
                    module.weight.zero_()
                else:
                    fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                    bound = math.sqrt(6.0 / fan_in)
                    module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()
    return model


@dataclass
class TeacherState:
    """EMA copy of the student plus its momentum."""

    model: SegModel
    momentum: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def make_teacher(student: SegModel, momentum: float) -> TeacherState:
    model = copy.deepcopy(student)
    for p in model.parameters():
        p.requires_grad_(False)
    return TeacherState(model=model, momentum=momentum)


def copy_into_teacher(teacher: TeacherState, student: SegModel) -> None:
    """Hard reset: teacher <- student (used right after warm-up)."""
    with torch.no_grad():
        for pt, ps in zip(teacher.model.parameters(), student.parameters(), strict=True):
            pt.copy_(ps)


def ema_update(teacher: TeacherState, student: SegModel) -> TeacherState:
    """In-place exponential moving average: t <- m * t + (1 - m) * s."""
    m = teacher.momentum
    with torch.no_grad():
        for pt, ps in zip(teacher.model.parameters(), student.parameters(), strict=True):
            if pt.shape != ps.shape:
                raise ValueError(f"teacher/student shape mismatch: {tuple(pt.shape)} vs {tuple(ps.shape)}")
            pt.mul_(m).add_(ps, alpha=1.0 - m)
    return teacher


def save_checkpoint(model: SegModel, path: str) -> None:
    """Bit-exact npz checkpoint with a format version tag."""
    arrays = {f"param.{name}": p.detach().numpy() for name, p in model.named_parameters()}
    meta = {
        "version": np.int64(CHECKPOINT_VERSION),
        "class_count": np.int64(model.arch.class_count),
        "feature_width": np.int64(model.arch.feature_width),
        "stem_widths": np.asarray(model.arch.stem_widths, dtype=np.int64),
    }
    # Write through a handle so numpy does not append a second extension.
    with open(path, "wb") as fh:
        np.savez(fh, **meta, **arrays)


def load_checkpoint(path: str) -> SegModel:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = ArchSpec(
            class_count=int(data["class_count"]),
            feature_width=int(data["feature_width"]),
            stem_widths=tuple(int(v) for v in data["stem_widths"]),
        )
        params = {k[len("param."):]: data[k] for k in data.files if k.startswith("param.")}
    sample = next(iter(params.values()))
    model = SegModel(arch).to(torch.from_numpy(sample).dtype)
    state = {name: torch.from_numpy(arr) for name, arr in params.items()}
    model.load_state_dict(state, strict=True)
    return model


def parameter_vector(model: SegModel) -> torch.Tensor:
    """Flat copy of all parameters (used by finite-difference checks)."""
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def load_parameter_vector(model: SegModel, vec: torch.Tensor) -> None:
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(vec[offset : offset + n].view_as(p))
            offset += n
    if offset != vec.numel():
        raise ValueError(f"vector length {vec.numel()} does not match parameter count {offset}")
