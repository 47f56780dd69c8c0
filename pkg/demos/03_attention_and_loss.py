"""Anatomy of the model head: attention pooling and the joint loss.

Run with ``python3 demos/03_attention_and_loss.py``. Everything here is
small enough to read in full precision on stdout.
"""

import math

import numpy as np

from icoview import (
    AttentionPool,
    EncoderConfig,
    LossConfig,
    attention_pool,
    backward,
    class_weights,
    forward_batch,
    init_params,
    loss,
)

rng = np.random.default_rng(0)

# --- attention pooling -----------------------------------------------------
# Each view contributes a feature vector; a learned linear score per view is
# softmax-normalized into weights, and the pooled vector is the weighted sum.
features = rng.normal(size=(12, 8))
pool = AttentionPool(score_weights=rng.normal(size=8), score_bias=0.0)
pooled, weights = attention_pool(features, pool)
print("attention weights per view:")
print(np.array2string(weights, precision=4))
print(f"weights sum to {weights.sum():.12f}; most informative view = {weights.argmax()}")

# Shifting every score by a constant changes nothing (softmax invariance),
# while boosting one view's score concentrates the pooled vector on it.
shifted = AttentionPool(score_weights=pool.score_weights, score_bias=37.0)
print(f"bias shift changes weights by {np.abs(attention_pool(features, shifted)[1] - weights).max():.2e}")

# --- class weights ----------------------------------------------------------
# Age bins are imbalanced, so the classification term re-weights classes by
# inverse frequency, rescaled to mean 1 to keep the loss magnitude steady.
counts = [5, 10, 10, 10, 15]
print(f"\nbin counts {counts} -> weights {np.round(class_weights(counts).weights, 4)}")

# --- the joint loss ---------------------------------------------------------
# One output head drives both tasks: squared error on the continuous age plus
# weighted cross-entropy on the age bin, blended by ce_lambda.
cfg = LossConfig(ce_lambda=1.0)
uniform_logits = np.zeros(5)
value = loss(30.0, uniform_logits, 32.0, 0, cfg)
print(f"\nuniform logits, 2-week error: loss = {value:.6f} (= 4 + ln 5 = {4 + math.log(5):.6f})")
print(f"regression only (ce_lambda=0): {loss(30.0, uniform_logits, 32.0, 0, LossConfig(ce_lambda=0.0)):.6f}")

# --- gradients through the whole model --------------------------------------
# The full model is differentiated by hand. A single backward call fills a
# gradient slot for every parameter; here the classification term is switched
# off, and the logit rows of the head receive exactly zero gradient.
config = EncoderConfig(in_channels=1, stage_channels=(2, 3))
params = init_params(config, seed=0)
images = rng.random((2, 2, 1, 16, 16))
value, result = backward(
    images, np.array([30.0, 36.0]), np.array([1, 2]), config, params, LossConfig(ce_lambda=0.0)
)
print(f"\nbatch loss {value:.4f}; predictions {np.round(result.ga_pred, 3)}")
print(f"logit-row gradient magnitude with ce_lambda=0: {np.abs(params.grad('head.weight')[1:]).max()}")
print(f"age-row gradient magnitude:                    {np.abs(params.grad('head.weight')[0]).max():.6f}")

# Attention weights are part of every forward result, one row per sample —
# useful for asking which views the model actually listened to.
batch = forward_batch(images, config, params)
print(f"\nper-sample attention over {batch.attention.shape[1]} views:\n{np.round(batch.attention, 4)}")
