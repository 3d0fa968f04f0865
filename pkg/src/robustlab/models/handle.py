"""Building models and interacting with them as attack targets."""

from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn as nn

from ..attacks.losses import LossSpec, loss_value
from ..errors import ConfigurationError
from .backbones import LadderNet, LayerNorm2d
from .config import ModelConfig
from .transformers import ViTNet, XCiTNet


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.BatchNorm2d, nn.BatchNorm1d, nn.LayerNorm, LayerNorm2d)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


@dataclass
class ModelHandle:
    """A built model plus its config.

    The wrapped module is the attack target; eval mode is the default and the
    required mode for every attack and capture call. In eval mode forwards are
    deterministic, so the handle may be shared by concurrent attack workers.
    """

    config: ModelConfig
    module: nn.Module

    @property
    def mode(self):
        return "train" if self.module.training else "eval"

    @property
    def parameter_count(self):
        return sum(p.numel() for p in self.module.parameters() if p.requires_grad)

    def eval(self):
        self.module.eval()
        return self

    def train(self):
        self.module.train()
        return self

    def __call__(self, batch):
        return self.module(batch)

    def predict(self, batch):
        with torch.no_grad():
            return self.module(batch).argmax(dim=1)

    def _capture_target(self):
        if self.config.family == "vit":
            return self.module.last_attention
        if self.config.family == "xcit":
            return self.module.last_xca
        raise ConfigurationError(
            f"family {self.config.family!r} has no attention capture hooks"
        )

    @contextmanager
    def _capturing(self):
        target = self._capture_target()
        target.capture = True
        try:
            yield target
        finally:
            target.capture = False

    def capture_attention(self, batch):
        """Softmax attention of the last block, (N, heads, T, T). vit only."""
        if self.config.family != "vit":
            raise ConfigurationError(
                f"attention capture needs family vit, got {self.config.family!r}"
            )
        with self._capturing() as target, torch.no_grad():
            self.module(batch)
            out = target.captured
            target.captured = None
        return out

    def capture_qk(self, batch):
        """Raw per-head queries and keys of the last XCA block, each
        (N, heads, T, head_dim), taken before l2 normalization. xcit only."""
        if self.config.family != "xcit":
            raise ConfigurationError(
                f"query/key capture needs family xcit, got {self.config.family!r}"
            )
        with self._capturing() as target, torch.no_grad():
            self.module(batch)
            q, k = target.captured_q, target.captured_k
            target.captured_q = target.captured_k = None
        return q, k


def build_model(config, seed=0):
    """Construct and initialize a model deterministically from its config.

    Same config and seed give bit-identical parameters. The handle comes back
    in eval mode.
    """
    torch.manual_seed(seed)
    if config.family in ("resnet_ladder", "convnext"):
        module = LadderNet(config)
    elif config.family == "vit":
        module = ViTNet(config)
    else:
        module = XCiTNet(config)
    module.apply(_init_weights)
    # token parameters are created as zeros; give them the standard spread
    if config.family == "vit":
        nn.init.trunc_normal_(module.pos, std=0.02)
        nn.init.trunc_normal_(module.cls_token, std=0.02)
    return ModelHandle(config=config, module=module).eval()


def count_parameters(model):
    """Exact count of trainable scalar parameters."""
    module = model.module if isinstance(model, ModelHandle) else model
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def gradient_wrt_input(model, batch, labels, loss=LossSpec("margin")):
    """d(sum of per-example loss) / d(input), same shape as batch.

    Parameters are untouched; the model must be in eval mode.
    """
    module = model.module if isinstance(model, ModelHandle) else model
    if module.training:
        raise ConfigurationError("gradient_wrt_input requires eval mode")
    if batch.shape[0] != labels.shape[0]:
        raise ConfigurationError(
            f"batch of {batch.shape[0]} vs {labels.shape[0]} labels"
        )
    x = batch.detach().requires_grad_(True)
    value = loss_value(module(x), labels, loss).sum()
    (grad,) = torch.autograd.grad(value, x)
    return grad.detach()
