"""1-D ResNet18(k) and WideResNet-d-k classifiers plus a checkpoint container."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

FAMILIES = ("resnet18", "wrn")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    width: int
    in_channels: int
    n_classes: int
    depth: int = 16
    kernel_size: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family == "wrn" and (self.depth < 10 or (self.depth - 4) % 6 != 0):
            raise ValueError(f"WRN depth must satisfy (depth - 4) % 6 == 0, got {self.depth}")
        if self.width < 1 or self.in_channels < 1 or self.n_classes < 1:
            raise ValueError("width, in_channels and n_classes must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")

    @property
    def name(self) -> str:
        if self.family == "wrn":
            return f"WRN{self.depth}-{self.width}"
        return f"ResNet18({self.width})"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def wrn(depth: int, width: int, in_channels: int = 3, n_classes: int = 14) -> ModelSpec:
    return ModelSpec("wrn", width, in_channels, n_classes, depth=depth)


def resnet18(width: int, in_channels: int = 3, n_classes: int = 14) -> ModelSpec:
    return ModelSpec("resnet18", width, in_channels, n_classes, depth=18)


# ---------------------------------------------------------------------------
# WideResNet


class WideBlock(nn.Module):
    """Pre-activation basic block (BN-ReLU-conv twice) with 1x1 projection on shape change."""

    def __init__(self, in_planes, out_planes, stride, kernel_size):
        super().__init__()
        pad = kernel_size // 2
        self.bn1 = nn.BatchNorm1d(in_planes)
        self.conv1 = nn.Conv1d(in_planes, out_planes, kernel_size, stride=stride, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm1d(out_planes)
        self.conv2 = nn.Conv1d(out_planes, out_planes, kernel_size, stride=1, padding=pad, bias=False)
        self.shortcut = None
        if in_planes != out_planes or stride != 1:
            self.shortcut = nn.Conv1d(in_planes, out_planes, 1, stride=stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        residual = x if self.shortcut is None else self.shortcut(o)
        o = self.conv1(o)
        o = self.conv2(F.relu(self.bn2(o)))
        return residual + o


class WideResNet1d(nn.Module):
    def __init__(self, depth, width, in_channels, n_classes, kernel_size=3):
        super().__init__()
        n = (depth - 4) // 6
        widths = [16, 16 * width, 32 * width, 64 * width]
        self.conv1 = nn.Conv1d(in_channels, widths[0], kernel_size, padding=kernel_size // 2, bias=False)
        layers = []
        for g, stride in enumerate((1, 2, 2)):
            for i in range(n):
                layers.append(WideBlock(widths[g] if i == 0 else widths[g + 1], widths[g + 1],
                                        stride if i == 0 else 1, kernel_size))
        self.blocks = nn.Sequential(*layers)
        self.bn = nn.BatchNorm1d(widths[3])
        self.fc = nn.Linear(widths[3], n_classes)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Conv1d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm1d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)

    def features(self, x):
        x = self.blocks(self.conv1(x))
        return F.relu(self.bn(x)).mean(dim=-1)

    def forward(self, x):
        return self.fc(self.features(x))


# ---------------------------------------------------------------------------
# ResNet18


class BasicBlock(nn.Module):
    """Post-activation ResNet basic block; conv1x1+BN shortcut on shape change."""

    def __init__(self, in_planes, out_planes, stride, kernel_size):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(in_planes, out_planes, kernel_size, stride=stride, padding=pad, bias=False)
        self.bn1 = nn.BatchNorm1d(out_planes)
        self.conv2 = nn.Conv1d(out_planes, out_planes, kernel_size, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm1d(out_planes)
        self.shortcut = nn.Identity()
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Sequential(
                nn.Conv1d(in_planes, out_planes, 1, stride=stride, bias=False),
                nn.BatchNorm1d(out_planes),
            )

    def forward(self, x):
        o = F.relu(self.bn1(self.conv1(x)))
        o = self.bn2(self.conv2(o))
        return F.relu(o + self.shortcut(x))


class ResNet18_1d(nn.Module):
    STEM_KERNEL = 7

    def __init__(self, width, in_channels, n_classes, kernel_size=3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv1d(in_channels, width, self.STEM_KERNEL, padding=self.STEM_KERNEL // 2, bias=False),
            nn.BatchNorm1d(width),
            nn.ReLU(inplace=True),
        )
        layers, planes = [], width
        for stage, stride in enumerate((1, 2, 2, 2)):
            out = width * 2 ** stage
            layers.append(BasicBlock(planes, out, stride, kernel_size))
            layers.append(BasicBlock(out, out, 1, kernel_size))
            planes = out
        self.blocks = nn.Sequential(*layers)
        self.fc = nn.Linear(planes, n_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv1d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def features(self, x):
        return self.blocks(self.stem(x)).mean(dim=-1)

    def forward(self, x):
        return self.fc(self.features(x))


class Classifier(nn.Module):
    """Wraps a backbone; rejects non-finite input and remembers its spec."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        if spec.family == "wrn":
            self.net = WideResNet1d(spec.depth, spec.width, spec.in_channels, spec.n_classes, spec.kernel_size)
        else:
            self.net = ResNet18_1d(spec.width, spec.in_channels, spec.n_classes, spec.kernel_size)

    @property
    def head(self) -> nn.Linear:
        return self.net.fc

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected input (B, {self.spec.in_channels}, T), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in model input")
        return self.net(x)


def build(spec: ModelSpec) -> Classifier:
    return Classifier(spec)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@torch.no_grad()
def forward(model: nn.Module, batch) -> torch.Tensor:
    """Inference-mode logits for a (B, C, T) batch (numpy or tensor)."""
    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(np.asarray(batch, dtype=np.float32) if not torch.is_tensor(batch) else batch)
        return model(x)
    finally:
        model.train(was_training)


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"KDCKPT01"
CKPT_FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    state: dict  # name -> numpy array
    epoch: int
    metrics: dict = field(default_factory=dict)
    config_hash: str = ""

    @classmethod
    def from_model(cls, model: Classifier, epoch: int, metrics: dict | None = None,
                   config_hash: str = "") -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.spec, state, epoch, dict(metrics or {}), config_hash)

    def to_model(self) -> Classifier:
        model = build(self.spec)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        return model

    def to_bytes(self) -> bytes:
        """Magic, u64 header length, JSON header, then the raw tensors back to back."""
        index, blobs, offset = [], [], 0
        for name in sorted(self.state):
            arr = np.ascontiguousarray(self.state[name])
            raw = arr.tobytes()
            index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format_version": CKPT_FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "epoch": self.epoch,
            "metrics": self.metrics,
            "config_hash": self.config_hash,
            "tensors": index,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + hlen])
        if header["format_version"] != CKPT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header['format_version']}")
        body = memoryview(data)[16 + hlen:]
        state = {}
        for t in header["tensors"]:
            buf = body[t["offset"]:t["offset"] + t["nbytes"]]
            state[t["name"]] = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        return cls(ModelSpec.from_dict(header["spec"]), state, header["epoch"], header["metrics"],
                   header["config_hash"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# Parameter counts reported for the model zoo (in_channels=3, n_classes=14).
REFERENCE_PARAM_COUNTS = {
    ("resnet18", 18, 8): 62_182,
    ("resnet18", 18, 16): 244_158,
    ("resnet18", 18, 24): 545_942,
    ("resnet18", 18, 32): 967_534,
    ("resnet18", 18, 48): 2_170_142,
    ("resnet18", 18, 64): 3_851_982,
    ("wrn", 16, 1): 61_374,
    ("wrn", 16, 2): 240_318,
    ("wrn", 16, 3): 536_254,
    ("wrn", 16, 4): 949_438,
    ("wrn", 16, 6): 2_127_550,
    ("wrn", 16, 8): 3_774_654,
    ("wrn", 28, 1): 126_782,
    ("wrn", 28, 2): 500_158,
    ("wrn", 28, 3): 1_119_550,
    ("wrn", 28, 4): 1_985_214,
    ("wrn", 28, 6): 4_455_358,
}
