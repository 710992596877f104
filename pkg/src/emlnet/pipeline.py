"""Piecewise encoder/decoder training and prediction.

Encoder stage
    One backbone at a time.  Its last feature stack is compressed to a single
    map by a bias-free 1x1 conv, passed through ReLU, bilinearly resized to
    the input size and scored with the combined loss.  No multi-level
    features are used here.

Decoder stage
    Every encoder is frozen.  Each tap of each backbone is compressed to one
    map (1x1 conv + ReLU), the maps are resized to the largest tap's size
    (not the input size), concatenated, fused by a 1x1 conv + ReLU, and
    resized to the input size.  Only the decoder's ``sum(C_l) + K`` weights
    train.

Weights are trained in float64 and stored in checkpoints as float32.
"""

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from emlnet.core import SaliencyError, ShapeMismatch, NonFiniteLoss, EmptyFixations
from emlnet.dataio import resize_fixations, resize_image, resize_map
from emlnet.losses import SIGMA_FLOOR, batch_combined_loss
from emlnet.micronet import (
    ConvLayer,
    SgdConfig,
    TinyBackbone,
    bilinear_resize,
    bilinear_resize_backward,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    relu,
    relu_backward,
    sgd_step,
    split_channels,
)

MAGIC = b"EMLK"
FORMAT_VERSION = 1


class ArchitectureMismatch(SaliencyError):
    pass


class EmptyDataset(SaliencyError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    input_w: int = 640
    input_h: int = 480
    batch_size: int = 8
    epochs: int = 10
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(schedule=((5, 0.1),)))
    seed: int = 0
    epsilon: float = 1e-7
    update_backbone: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if isinstance(self.sgd, dict):
            self.sgd = SgdConfig(**self.sgd)

    def as_dict(self):
        d = asdict(self)
        d["sgd"]["schedule"] = [list(s) for s in self.sgd.schedule]
        return d


def encoder_config(**overrides):
    """Encoder-stage defaults: batch 8, lr 0.1 decayed x0.1 after five epochs."""
    return TrainConfig(**overrides)


def decoder_config(**overrides):
    """Decoder-stage defaults: batch 32, five epochs, x0.1 at the third epoch."""
    kw = dict(batch_size=32, epochs=5, sgd=SgdConfig(schedule=((2, 0.1),)))
    kw.update(overrides)
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    """Architecture descriptor + named float32 weights + training metadata."""

    kind: str
    architecture: dict
    weights: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.weights.items()}

    def params(self):
        """float64 copies of the weights, for computation."""
        return {k: v.astype(np.float64) for k, v in self.weights.items()}

    def to_bytes(self):
        descriptor = json.dumps(
            {"kind": self.kind, "architecture": self.architecture, "metadata": self.metadata},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<H", FORMAT_VERSION))
        out.write(struct.pack("<I", len(descriptor)))
        out.write(descriptor)
        out.write(struct.pack("<I", len(self.weights)))
        offset = 0
        for name, arr in self.weights.items():
            raw = name.encode("utf-8")
            out.write(struct.pack("<I", len(raw)))
            out.write(raw)
            out.write(struct.pack("<I", arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.write(struct.pack("<Q", offset))
            offset += arr.size * 4
        for arr in self.weights.values():
            out.write(arr.astype("<f4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data):
        buf = memoryview(data)
        if bytes(buf[:4]) != MAGIC:
            raise ArchitectureMismatch("not a checkpoint file (bad magic)")
        pos = 4
        (version,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if version != FORMAT_VERSION:
            raise ArchitectureMismatch(f"unsupported checkpoint version {version}")
        (dlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        doc = json.loads(bytes(buf[pos : pos + dlen]).decode("utf-8"))
        pos += dlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = bytes(buf[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            (offset,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            manifest.append((name, shape, offset))
        payload = buf[pos:]
        expected = sum(int(np.prod(s)) for _, s, _ in manifest) * 4
        if len(payload) != expected:
            raise ArchitectureMismatch(f"payload is {len(payload)} bytes, manifest needs {expected}")
        weights = {}
        for name, shape, offset in manifest:
            n = int(np.prod(shape))
            weights[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        return cls(doc["kind"], doc["architecture"], weights, doc.get("metadata", {}))

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return path

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def weights_digest(self):
        """Hash of names, shapes and weight bytes only (ignores metadata)."""
        h = hashlib.sha256()
        for name, arr in self.weights.items():
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.astype("<f4").tobytes())
        return h.hexdigest()

    def backbone(self):
        if self.kind != "encoder":
            raise ArchitectureMismatch(f"{self.kind} checkpoint has no backbone")
        return TinyBackbone.from_descriptor(self.architecture["backbone"])


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def init_compress(rng, in_channels, out_channels=1):
    """1x1 compression weights drawn from U(0, sqrt(6 / fan_in)).

    Nonnegative so that a ReLU over nonnegative features starts active.
    """
    bound = np.sqrt(6.0 / in_channels)
    return rng.uniform(0.0, bound, size=(out_channels, in_channels, 1, 1))


@dataclass
class EncoderHead:
    channels: int
    bias: bool = False

    @property
    def n_params(self):
        return self.channels + (1 if self.bias else 0)

    def init_params(self, rng):
        p = {"head.weight": init_compress(rng, self.channels)}
        if self.bias:
            p["head.bias"] = np.zeros(1)
        return p


@dataclass
class EmlDecoder:
    """Per-tap 1x1 compressions plus a K->1 fusion conv."""

    tap_channels: tuple
    bias: bool = False

    def __post_init__(self):
        self.tap_channels = tuple(int(c) for c in self.tap_channels)
        if not self.tap_channels:
            raise ValueError("decoder needs at least one tap")

    @property
    def n_taps(self):
        return len(self.tap_channels)

    @property
    def n_params(self):
        n = sum(self.tap_channels) + self.n_taps
        if self.bias:
            n += self.n_taps + 1
        return n

    def init_params(self, rng):
        p = {}
        for k, c in enumerate(self.tap_channels):
            p[f"decoder.tap{k}.weight"] = init_compress(rng, c)
            if self.bias:
                p[f"decoder.tap{k}.bias"] = np.zeros(1)
        p["decoder.fuse.weight"] = init_compress(rng, self.n_taps)
        if self.bias:
            p["decoder.fuse.bias"] = np.zeros(1)
        return p

    def descriptor(self):
        return {"tap_channels": list(self.tap_channels), "bias": self.bias}


def decoder_param_count(tap_channels, bias=False):
    """Parameters of an EmlDecoder over taps with the given channel counts."""
    return EmlDecoder(tuple(tap_channels), bias=bias).n_params


def _conv1x1(params, prefix):
    return ConvLayer(params[f"{prefix}.weight"], params.get(f"{prefix}.bias"))


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def prepare_sample(sample, width, height):
    """Image, density and fixation map at the network input size."""
    image, Q, F = sample.image, sample.density, sample.fixations
    if Q.shape != image.shape[1:] or F.shape != image.shape[1:]:
        raise ShapeMismatch(f"{sample.image_id}: image, density and fixations differ in shape")
    if image.shape[1:] != (height, width):
        image = resize_image(image, width, height)
        Q = resize_map(Q / Q.sum(), width, height)
        F = resize_fixations(F, width, height)
    return image, Q, F


def _stack(data, width, height):
    if len(data) == 0:
        raise EmptyDataset("dataset is empty")
    prepared = [prepare_sample(s, width, height) for s in data]
    X = np.stack([p[0] for p in prepared])
    Q = np.stack([p[1] for p in prepared])
    F = np.stack([p[2] for p in prepared])
    for s, f in zip(data, F):
        if f.sum() == 0:
            raise EmptyFixations(f"{s.image_id}: no fixations")
    return X, Q, F


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


_F32_MAX = float(np.finfo(np.float32).max)


def _check_weights(params, snapshot):
    """Weights are stored as float32; anything beyond that range is lost."""
    for name, v in params.items():
        if not np.all(np.abs(v) < _F32_MAX):
            raise NonFiniteLoss(f"weights in {name} left the float32 range", snapshot())


def _loss_or_abort(P, Q, F, eps, snapshot):
    try:
        out = batch_combined_loss(P, Q, F, eps, SIGMA_FLOOR)
    except SaliencyError as err:
        raise NonFiniteLoss(f"loss undefined: {err}", snapshot()) from err
    if not np.isfinite(out.value) or not np.all(np.isfinite(out.grad)):
        raise NonFiniteLoss("non-finite loss", snapshot())
    return out


# ---------------------------------------------------------------------------
# encoder stage
# ---------------------------------------------------------------------------


def encoder_forward(backbone, params, x, width, height):
    """Prediction of an encoder-stage model; returns ``(P, cache)``."""
    final, _, bcache = backbone.forward(params, x)
    z = conv2d_forward(final, _conv1x1(params, "head"))
    a = relu(z)
    P = bilinear_resize(a, width, height)[:, 0]
    return P, (final, z, bcache)


def encoder_backward(backbone, params, cache, grad_P, update_backbone=True):
    final, z, bcache = cache
    fh, fw = final.shape[2:]
    g = bilinear_resize_backward(grad_P[:, None], fw, fh)
    g = relu_backward(z, g)
    g_final, gw, gb = conv2d_backward(final, _conv1x1(params, "head"), g)
    grads = {"head.weight": gw}
    if gb is not None:
        grads["head.bias"] = gb
    if update_backbone:
        grads.update(backbone.backward(params, bcache, grad_final=g_final))
    return grads


def _encoder_checkpoint(backbone, head, params, cfg, curve, epoch, extra=None):
    meta = {"epoch": epoch, "loss_curve": list(curve), "seed": cfg.seed, "config": cfg.as_dict()}
    meta.update(extra or {})
    arch = {
        "backbone": backbone.descriptor(),
        "head": {"channels": head.channels, "bias": head.bias},
        "input": [cfg.input_w, cfg.input_h],
    }
    return ModelCheckpoint("encoder", arch, params, meta)


def train_encoder(backbone, data, cfg, head=None, init=None, log=None):
    """Train one backbone and its compression head on ``data``.

    ``init`` continues from an existing encoder checkpoint (fine-tuning);
    otherwise weights are drawn from ``cfg.seed``.  Returns the checkpoint
    with the per-epoch mean training loss in ``metadata['loss_curve']``.
    """
    head = head or EncoderHead(backbone.out_channels)
    if head.channels != backbone.out_channels:
        raise ArchitectureMismatch("head channels do not match the backbone output")
    rng = np.random.default_rng(cfg.seed)
    if init is not None:
        if init.kind != "encoder" or init.architecture["backbone"] != backbone.descriptor():
            raise ArchitectureMismatch("initial checkpoint does not match the backbone")
        params = init.params()
        prior_curve = list(init.metadata.get("loss_curve", []))
    else:
        params = backbone.init_params(rng)
        params.update(head.init_params(rng))
        prior_curve = []
    X, Q, F = _stack(data, cfg.input_w, cfg.input_h)

    curve = []
    state = {}

    # an abort hands back the weights as they were when the epoch began
    good = {}

    def snapshot():
        return _encoder_checkpoint(backbone, head, good, cfg, curve, len(curve), {"aborted": True})

    for epoch in range(cfg.epochs):
        lr = cfg.sgd.lr_at(epoch)
        total = 0.0
        good = {k: v.copy() for k, v in params.items()}
        for idx in _batches(rng, len(X), cfg.batch_size):
            P, cache = encoder_forward(backbone, params, X[idx], cfg.input_w, cfg.input_h)
            out = _loss_or_abort(P, Q[idx], F[idx], cfg.epsilon, snapshot)
            grads = encoder_backward(backbone, params, cache, out.grad, cfg.update_backbone)
            sgd_step(params, grads, state, cfg.sgd, lr)
            _check_weights(params, snapshot)
            total += out.value * len(idx)
        curve.append(total / len(X))
        if log:
            log(f"encoder epoch {epoch + 1}/{cfg.epochs} lr={lr:g} loss={curve[-1]:.4f}")
    extra = {"prior_loss_curve": prior_curve} if init is not None else None
    return _encoder_checkpoint(backbone, head, params, cfg, curve, cfg.epochs, extra)


def encoder_predict(checkpoint, images):
    """Encoder-stage prediction for a batch ``(B, C, H, W)`` at input size."""
    backbone = checkpoint.backbone()
    w, h = checkpoint.architecture["input"]
    P, _ = encoder_forward(backbone, checkpoint.params(), images, w, h)
    return P


def encoder_loss(checkpoint, data, eps=1e-7):
    """Mean combined loss of an encoder-stage model over ``data``."""
    w, h = checkpoint.architecture["input"]
    X, Q, F = _stack(data, w, h)
    P = encoder_predict(checkpoint, X)
    return batch_combined_loss(P, Q, F, eps, SIGMA_FLOOR).value


# ---------------------------------------------------------------------------
# decoder stage
# ---------------------------------------------------------------------------


def extract_multilevel(backbone, checkpoint, image):
    """Tap feature stacks of ``image`` (one or a batch), ordered by depth."""
    if checkpoint.kind != "encoder" or checkpoint.architecture["backbone"] != backbone.descriptor():
        raise ArchitectureMismatch("checkpoint does not match the backbone")
    _, taps, _ = backbone.forward(checkpoint.params(), image)
    return taps


def alignment_size(tap_shapes):
    """``(h, w)`` of the largest tap; every tap must fit inside it."""
    largest = max(tap_shapes, key=lambda s: s[0] * s[1])
    for s in tap_shapes:
        if s[0] > largest[0] or s[1] > largest[1]:
            raise ArchitectureMismatch(f"tap {s} does not fit the alignment size {largest}")
    return largest


def decoder_forward(decoder, params, taps, width, height):
    """Decoder prediction ``(B, H, W)`` from per-tap stacks; returns ``(P, cache)``.

    ``cache['fused']`` is the aligned ``(B, K, h_max, w_max)`` concatenation.
    """
    if len(taps) != decoder.n_taps:
        raise ArchitectureMismatch(f"decoder expects {decoder.n_taps} taps, got {len(taps)}")
    ah, aw = alignment_size([t.shape[-2:] for t in taps])
    zs, aligned = [], []
    for k, t in enumerate(taps):
        if t.shape[1] != decoder.tap_channels[k]:
            raise ArchitectureMismatch(f"tap {k} has {t.shape[1]} channels, expected {decoder.tap_channels[k]}")
        z = conv2d_forward(t, _conv1x1(params, f"decoder.tap{k}"))
        zs.append(z)
        aligned.append(bilinear_resize(relu(z), aw, ah))
    fused = concat_channels(aligned)
    zf = conv2d_forward(fused, _conv1x1(params, "decoder.fuse"))
    P = bilinear_resize(relu(zf), width, height)[:, 0]
    return P, {"taps": taps, "zs": zs, "fused": fused, "zf": zf}


def decoder_backward(decoder, params, cache, grad_P):
    taps, zs, fused, zf = cache["taps"], cache["zs"], cache["fused"], cache["zf"]
    ah, aw = fused.shape[2:]
    g = bilinear_resize_backward(grad_P[:, None], aw, ah)
    g = relu_backward(zf, g)
    g_fused, gw, gb = conv2d_backward(fused, _conv1x1(params, "decoder.fuse"), g)
    grads = {"decoder.fuse.weight": gw}
    if gb is not None:
        grads["decoder.fuse.bias"] = gb
    for k, (t, z, gk) in enumerate(zip(taps, zs, split_channels(g_fused, [1] * len(taps)))):
        th, tw = t.shape[2:]
        gz = relu_backward(z, bilinear_resize_backward(gk, tw, th))
        _, gw, gb = conv2d_backward(t, _conv1x1(params, f"decoder.tap{k}"), gz)
        grads[f"decoder.tap{k}.weight"] = gw
        if gb is not None:
            grads[f"decoder.tap{k}.bias"] = gb
    return {name: grads[name] for name in params}


def _frozen_features(encoders, X, chunk=64):
    """Tap stacks for every encoder, concatenated in encoder order."""
    feats = None
    for start in range(0, len(X), chunk):
        taps = []
        for ckpt in encoders:
            taps.extend(ckpt.backbone().forward(ckpt.params(), X[start : start + chunk])[1])
        if feats is None:
            feats = [[t] for t in taps]
        else:
            for acc, t in zip(feats, taps):
                acc.append(t)
    return [np.concatenate(f) for f in feats]


def _check_inputs(encoders):
    if not encoders:
        raise ArchitectureMismatch("at least one encoder checkpoint is required")
    sizes = {tuple(c.architecture["input"]) for c in encoders}
    if len(sizes) != 1:
        raise ArchitectureMismatch(f"encoders were trained at different input sizes: {sorted(sizes)}")
    for c in encoders:
        if c.kind != "encoder":
            raise ArchitectureMismatch(f"expected encoder checkpoints, got {c.kind}")
    return sizes.pop()


def train_decoder(encoders, data, cfg, bias=False, log=None):
    """Train a fresh decoder over the frozen taps of ``encoders``.

    Encoder checkpoints are only read; their features are computed once.
    """
    width, height = _check_inputs(encoders)
    if (cfg.input_w, cfg.input_h) != (width, height):
        raise ArchitectureMismatch(
            f"decoder input {cfg.input_w}x{cfg.input_h} differs from encoder input {width}x{height}"
        )
    tap_channels = [c for ckpt in encoders for c in ckpt.backbone().tap_channels]
    decoder = EmlDecoder(tuple(tap_channels), bias=bias)
    rng = np.random.default_rng(cfg.seed)
    params = decoder.init_params(rng)
    X, Q, F = _stack(data, width, height)
    feats = _frozen_features(encoders, X)

    curve = []
    state = {}
    arch = {
        "decoder": decoder.descriptor(),
        "encoders": [c.weights_digest() for c in encoders],
        "input": [width, height],
    }

    good = {}

    def make(epoch, weights, aborted=False):
        meta = {"epoch": epoch, "loss_curve": list(curve), "seed": cfg.seed, "config": cfg.as_dict()}
        if aborted:
            meta["aborted"] = True
        return ModelCheckpoint("decoder", arch, weights, meta)

    def snapshot():
        return make(len(curve), good, True)

    for epoch in range(cfg.epochs):
        lr = cfg.sgd.lr_at(epoch)
        total = 0.0
        good = {k: v.copy() for k, v in params.items()}
        for idx in _batches(rng, len(X), cfg.batch_size):
            P, cache = decoder_forward(decoder, params, [f[idx] for f in feats], width, height)
            out = _loss_or_abort(P, Q[idx], F[idx], cfg.epsilon, snapshot)
            grads = decoder_backward(decoder, params, cache, out.grad)
            sgd_step(params, grads, state, cfg.sgd, lr)
            _check_weights(params, snapshot)
            total += out.value * len(idx)
        curve.append(total / len(X))
        if log:
            log(f"decoder epoch {epoch + 1}/{cfg.epochs} lr={lr:g} loss={curve[-1]:.4f}")
    return make(cfg.epochs, params)


# ---------------------------------------------------------------------------
# assembled system
# ---------------------------------------------------------------------------


class EmlSystem:
    """Frozen encoders plus a decoder trained on their taps."""

    def __init__(self, encoders, decoder):
        width, height = _check_inputs(encoders)
        if decoder.kind != "decoder":
            raise ArchitectureMismatch(f"expected a decoder checkpoint, got {decoder.kind}")
        if decoder.architecture["encoders"] != [c.weights_digest() for c in encoders]:
            raise ArchitectureMismatch("decoder was trained on different encoder weights")
        if tuple(decoder.architecture["input"]) != (width, height):
            raise ArchitectureMismatch("decoder and encoders disagree on the input size")
        self.encoders = list(encoders)
        self.decoder_ckpt = decoder
        self.decoder = EmlDecoder(**decoder.architecture["decoder"])
        self.width, self.height = width, height
        self._backbones = [c.backbone() for c in encoders]
        self._enc_params = [c.params() for c in encoders]
        self._dec_params = decoder.params()

    def taps(self, images):
        out = []
        for bb, params in zip(self._backbones, self._enc_params):
            out.extend(bb.forward(params, images)[1])
        return out

    def predict(self, image):
        """Nonnegative saliency map(s) at the input size.

        ``image`` is ``(C, H, W)`` or a batch; it must already be at the
        system's input size.
        """
        x = np.asarray(image, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[2:] != (self.height, self.width):
            raise ShapeMismatch(f"input is {x.shape[3]}x{x.shape[2]}, system expects {self.width}x{self.height}")
        P, _ = decoder_forward(self.decoder, self._dec_params, self.taps(x), self.width, self.height)
        return P[0] if single else P

    def loss(self, data, eps=1e-7):
        X, Q, F = _stack(data, self.width, self.height)
        return batch_combined_loss(self.predict(X), Q, F, eps, SIGMA_FLOOR).value


def predict(system, image):
    return system.predict(image)


def finetune(system, data, enc_cfg, dec_cfg, log=None):
    """Continue every encoder on ``data``, then retrain a fresh decoder."""
    encoders = []
    for ckpt in system.encoders:
        if enc_cfg.epochs == 0:
            encoders.append(ckpt)
        else:
            encoders.append(train_encoder(ckpt.backbone(), data, enc_cfg, init=ckpt, log=log))
    decoder = train_decoder(encoders, data, dec_cfg, bias=system.decoder.bias, log=log)
    return EmlSystem(encoders, decoder)
