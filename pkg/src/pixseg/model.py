"""Toy fully convolutional segmentation net with hand-written backprop.

Three stride-2 conv stages (shared trunk), per-branch linear projection
heads for the contrastive feature space, and a bilinear-upsample + 1x1
conv decoder. Parameters live in one flat float64 array with named
slices; gradients come back in the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolationError, InvalidParameterError, NumericalFailureError
from .interp import bilinear_adjoint, bilinear_resize

CHECKPOINT_MAGIC = "TOYNET 1"


@dataclass
class NetConfig:
    num_classes: int
    in_channels: int = 3
    widths: tuple = (16, 32, 64)
    proj_dim: int = 16
    feature_stage: int = 3      # 1-based encoder stage for contrastive features
    shared_projection: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.feature_stage <= len(self.widths):
            raise InvalidParameterError(
                f"feature_stage must be in 1..{len(self.widths)}")

    @property
    def feature_dim(self):
        return self.widths[self.feature_stage - 1]


@dataclass
class BranchOutput:
    features: np.ndarray   # (N, h, w, D) encoder features at the configured stage
    projected: np.ndarray  # (N, h, w, P)
    logits: np.ndarray     # (N, H, W, C)
    probs: np.ndarray      # (N, H, W, C)


def _conv_forward(x, w, b, stride=2, pad=1):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("nhwcij,ocij->nhwo", win, w, optimize=True) + b
    return out, xp


def _conv_backward(dout, xp, w, in_hw, stride=2, pad=1):
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    dw = np.einsum("nhwo,nhwcij->ocij", dout, win, optimize=True)
    db = dout.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    ho, wo = dout.shape[1], dout.shape[2]
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += np.einsum(
                    "nhwo,oc->nhwc", dout, w[:, :, i, j], optimize=True)
    h, w_in = in_hw
    return dxp[:, pad:pad + h, pad:pad + w_in], dw, db


class ToyNet:
    """Weight-shared weak/strong segmentation net on flat parameter storage."""

    def __init__(self, config):
        self.config = config
        c = config
        self._slices = {}
        shapes = []
        cin = c.in_channels
        for k, width in enumerate(c.widths, start=1):
            shapes.append((f"conv{k}_w", (width, cin, 3, 3)))
            shapes.append((f"conv{k}_b", (width,)))
            cin = width
        shapes.append(("head_w", (c.num_classes, c.widths[-1])))
        shapes.append(("head_b", (c.num_classes,)))
        if c.shared_projection:
            shapes.append(("proj_w", (c.proj_dim, c.feature_dim)))
        else:
            shapes.append(("proj_weak_w", (c.proj_dim, c.feature_dim)))
            shapes.append(("proj_strong_w", (c.proj_dim, c.feature_dim)))
        total = sum(int(np.prod(s)) for _, s in shapes)
        self.params = np.zeros(total)
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self._slices[name] = (offset, shape)
            offset += size
        self._init_params(np.random.default_rng(c.seed))

    def _init_params(self, rng):
        for name, (offset, shape) in self._slices.items():
            view = self.param(name)
            if name.endswith("_b"):
                view[:] = 0.0
            else:
                fan_in = int(np.prod(shape[1:]))
                # He/Kaiming uniform: keeps activation scale roughly constant
                # through the ReLU stack, so projected features start at O(1)
                # norm (the cosine-gradient 1/|z| factor stays tame).
                bound = np.sqrt(6.0 / fan_in)
                view[:] = rng.uniform(-bound, bound, size=shape)

    def param(self, name):
        offset, shape = self._slices[name]
        return self.params[offset:offset + int(np.prod(shape))].reshape(shape)

    def grad_view(self, flat, name):
        offset, shape = self._slices[name]
        return flat[offset:offset + int(np.prod(shape))].reshape(shape)

    def _proj_name(self, branch):
        if self.config.shared_projection:
            return "proj_w"
        if branch not in ("weak", "strong"):
            raise InvalidParameterError(f"unknown branch {branch!r}")
        return f"proj_{branch}_w"

    def forward(self, images, branch="weak", return_cache=False):
        """Run the trunk, the branch's projection head, and the decoder.

        Accepts a single (H, W, 3) image or an (N, H, W, 3) batch; single
        images come back with the batch axis squeezed away.
        """
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise InvalidParameterError(f"bad input shape {x.shape}")
        h, w = x.shape[1], x.shape[2]
        cache = {"input_hw": (h, w), "branch": branch, "acts": [], "pads": []}
        a = x
        for k in range(1, len(self.config.widths) + 1):
            s, xp = _conv_forward(a, self.param(f"conv{k}_w"), self.param(f"conv{k}_b"))
            if not np.isfinite(s).all():
                raise NumericalFailureError(f"non-finite activations after conv{k}")
            r = np.maximum(s, 0.0)
            cache["pads"].append(xp)
            cache["acts"].append(s)
            a = r
            if k == self.config.feature_stage:
                features = r
        cache["top"] = a
        proj = self.param(self._proj_name(branch))
        projected = np.einsum("nhwd,pd->nhwp", features, proj, optimize=True)
        up = bilinear_resize(a, h, w)
        logits = np.einsum("nhwd,cd->nhwc", up, self.param("head_w"),
                           optimize=True) + self.param("head_b")
        if not np.isfinite(logits).all():
            raise NumericalFailureError("non-finite activations after decoder head")
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=-1, keepdims=True)
        cache["features"] = features
        cache["up"] = up
        out = BranchOutput(features=features, projected=projected, logits=logits,
                           probs=probs)
        if single:
            out = BranchOutput(features=features[0], projected=projected[0],
                               logits=logits[0], probs=probs[0])
        if return_cache:
            return out, cache
        return out

    def backward(self, cache, d_logits=None, d_projected=None, trunk_grad=True):
        """Parameter gradients from upstream gradients at the logits and the
        projected features. With trunk_grad=False (the weak branch's
        stop-gradient), only the projection head receives gradient."""
        if cache is None or "acts" not in cache:
            raise ContractViolationError("backward needs the cache from forward")
        grads = np.zeros_like(self.params)
        n_stages = len(self.config.widths)
        stage = self.config.feature_stage
        h, w = cache["input_hw"]
        d_top = None

        if d_logits is not None:
            d_logits = np.asarray(d_logits, dtype=np.float64)
            if d_logits.ndim == 3:
                d_logits = d_logits[None]
            self.grad_view(grads, "head_w")[:] = np.einsum(
                "nhwc,nhwd->cd", d_logits, cache["up"], optimize=True)
            self.grad_view(grads, "head_b")[:] = d_logits.sum(axis=(0, 1, 2))
            d_up = np.einsum("nhwc,cd->nhwd", d_logits, self.param("head_w"),
                             optimize=True)
            d_top = bilinear_adjoint(d_up, cache["top"].shape[1], cache["top"].shape[2])

        d_features = None
        if d_projected is not None:
            d_projected = np.asarray(d_projected, dtype=np.float64)
            if d_projected.ndim == 3:
                d_projected = d_projected[None]
            pname = self._proj_name(cache["branch"])
            self.grad_view(grads, pname)[:] += np.einsum(
                "nhwp,nhwd->pd", d_projected, cache["features"], optimize=True)
            if trunk_grad:
                d_features = np.einsum("nhwp,pd->nhwd", d_projected,
                                       self.param(pname), optimize=True)

        if not trunk_grad:
            return grads

        d_r = d_top if d_top is not None else np.zeros_like(cache["top"])
        for k in range(n_stages, 0, -1):
            if k == stage and d_features is not None:
                d_r = d_r + d_features
            d_s = d_r * (cache["acts"][k - 1] > 0)
            in_hw = ((h, w) if k == 1 else cache["acts"][k - 2].shape[1:3])
            d_r, dw, db = _conv_backward(d_s, cache["pads"][k - 1],
                                         self.param(f"conv{k}_w"), in_hw)
            self.grad_view(grads, f"conv{k}_w")[:] = dw
            self.grad_view(grads, f"conv{k}_b")[:] = db
        return grads


def sgd_step(net, grads, step, base_lr, total_steps, weight_decay=0.0):
    """Linearly annealed SGD update with optional additive weight decay."""
    if step >= total_steps:
        raise InvalidParameterError(f"step {step} >= total_steps {total_steps}")
    lr = base_lr * (1.0 - step / total_steps)
    g = grads if weight_decay == 0.0 else grads + weight_decay * net.params
    net.params -= lr * g
    return net


def save_checkpoint(net, path, step=0):
    """Text header (version, config, seed, step) + little-endian float32 params."""
    c = net.config
    widths = ",".join(str(x) for x in c.widths)
    header = (f"{CHECKPOINT_MAGIC}\n"
              f"{c.num_classes} {c.in_channels} {widths} {c.proj_dim} "
              f"{c.feature_stage} {int(c.shared_projection)} {c.seed} {step}\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(net.params.astype("<f4").tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (net, step)."""
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii").strip()
        if magic != CHECKPOINT_MAGIC:
            raise InvalidParameterError(f"bad checkpoint magic {magic!r} in {path}")
        fields = f.readline().decode("ascii").split()
        num_classes, in_channels = int(fields[0]), int(fields[1])
        widths = tuple(int(x) for x in fields[2].split(","))
        proj_dim, feature_stage = int(fields[3]), int(fields[4])
        shared, seed, step = bool(int(fields[5])), int(fields[6]), int(fields[7])
        net = ToyNet(NetConfig(num_classes=num_classes, in_channels=in_channels,
                               widths=widths, proj_dim=proj_dim,
                               feature_stage=feature_stage,
                               shared_projection=shared, seed=seed))
        payload = np.frombuffer(f.read(net.params.size * 4), dtype="<f4")
        if payload.size != net.params.size:
            raise InvalidParameterError(f"truncated checkpoint {path}")
        net.params[:] = payload.astype(np.float64)
    return net, step
