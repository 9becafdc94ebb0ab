"""Scriptable stub segmentation models for exporter tests."""

from pathlib import Path

import torch


class ConstantLogits(torch.nn.Module):
    """Emits one constant logit per class channel, full resolution."""

    def __init__(self, biases: list[float]):
        super().__init__()
        self.bias = torch.nn.Parameter(torch.tensor(biases), requires_grad=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        h = x.shape[2]
        w = x.shape[3]
        out = self.bias.view(1, -1, 1, 1).expand(b, self.bias.shape[0], h, w)
        return out + 0.0 * x.mean()


class HalfResolutionLogits(torch.nn.Module):
    """Constant logits at half spatial resolution, to exercise upsampling."""

    def __init__(self, biases: list[float]):
        super().__init__()
        self.bias = torch.nn.Parameter(torch.tensor(biases), requires_grad=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        h = x.shape[2] // 2
        w = x.shape[3] // 2
        out = self.bias.view(1, -1, 1, 1).expand(b, self.bias.shape[0], h, w)
        return out + 0.0 * x.mean()


class IntensityLogits(torch.nn.Module):
    """Channel k responds to the mean input intensity scaled by (k + 1)."""

    def __init__(self, classes: int):
        super().__init__()
        self.scale = torch.nn.Parameter(
            torch.arange(1.0, classes + 1.0), requires_grad=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        intensity = x.mean(dim=1, keepdim=True)  # (B, 1, H, W)
        return intensity * self.scale.view(1, -1, 1, 1)


def save_stub(model: torch.nn.Module, path: Path) -> Path:
    scripted = torch.jit.script(model)
    torch.jit.save(scripted, str(path))
    return path
