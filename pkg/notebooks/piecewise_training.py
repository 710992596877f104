"""
Piecewise training at desk scale
================================

Two small backbones are trained separately as encoders, then frozen while
a decoder learns to fuse their multi-level features.  Everything runs on
synthetic 64x48 data in a couple of minutes on one CPU core.
"""

import time

import numpy as np

from emlnet.dataio import synthetic_samples
from emlnet.metrics import MetricConfig, evaluate_all, mean_report, render_table
from emlnet.micronet import SgdConfig, TinyBackbone
from emlnet.pipeline import (
    EmlSystem,
    TrainConfig,
    decoder_param_count,
    encoder_loss,
    encoder_predict,
    train_decoder,
    train_encoder,
)

train = synthetic_samples(200, 64, 48, seed=1)
val = synthetic_samples(50, 64, 48, seed=1001)

backbones = {
    "A": TinyBackbone(),
    "B": TinyBackbone(channels=(8, 16, 32), convs_per_stage=1),
}
enc_cfg = TrainConfig(
    input_w=64,
    input_h=48,
    batch_size=8,
    epochs=12,
    sgd=SgdConfig(learning_rate=3e-4, momentum=0.9, weight_decay=1e-4, schedule=((10, 0.1),)),
)
dec_cfg = TrainConfig(
    input_w=64,
    input_h=48,
    batch_size=32,
    epochs=5,
    sgd=SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=1e-4, schedule=((2, 0.1),)),
)

# %%
# Stage one: each backbone with its own 1x1 head, trained on its own.
start = time.perf_counter()
encoders = {}
for name, bb in backbones.items():
    encoders[name] = train_encoder(bb, train, enc_cfg, log=print)
    curve = encoders[name].metadata["loss_curve"]
    print(f"encoder {name}: loss {curve[0]:.3f} -> {curve[-1]:.3f}, taps {bb.tap_channels}")

# %%
# Stage two: the encoders are only read.  Their digests before and after
# decoder training show that nothing touched them.
digests = {k: v.weights_digest() for k, v in encoders.items()}
both = train_decoder([encoders["A"], encoders["B"]], train, dec_cfg, log=print)
assert digests == {k: v.weights_digest() for k, v in encoders.items()}
taps = backbones["A"].tap_channels + backbones["B"].tap_channels
print("decoder parameters:", decoder_param_count(taps), "for taps", taps)
system = EmlSystem([encoders["A"], encoders["B"]], both)
print(f"trained in {time.perf_counter() - start:.0f}s")

# %%
# Held-out combined loss: the fused system against each encoder alone.
for name, ck in encoders.items():
    print(f"encoder {name} alone: {encoder_loss(ck, val):.4f}")
print(f"decoder over A+B:  {system.loss(val):.4f}")

# %%
# Scores on the held-out images.
cfg = MetricConfig(rng_seed=0)
X = np.stack([s.image for s in val])
others = [s.fixations for s in val]


def scores(maps):
    reports = []
    for i, (P, s) in enumerate(zip(maps, val)):
        reports.append(evaluate_all(P, s.density, s.fixations, other_F=others[:i] + others[i + 1 :], cfg=cfg))
    return mean_report(reports)


rows = [(f"encoder {k}", scores(encoder_predict(ck, X))) for k, ck in encoders.items()]
rows.append(("A+B", scores(system.predict(X))))
print(render_table(rows, "validation"))
