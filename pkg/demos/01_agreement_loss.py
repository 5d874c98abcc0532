"""Walk through the agreement objective on a tiny untrained model.

Run with ``python3 demos/01_agreement_loss.py``.
"""
import numpy as np

from agreelab import numerics as nx
from agreelab.agreement import AgreementConfig, TriBatch, loss_total, smoothing_floor
from agreelab.model import ModelConfig, Transformer
from agreelab.tokenizer import EOS

## A model with a 40-token vocabulary and one layer on each side
cfg = ModelConfig(vocab_size=40, encoder_layers=1, decoder_layers=1, d_model=32, heads=2, d_ff=64, dropout=0.0)
model = Transformer.create(cfg, seed=0)
print("parameters:", sum(p.data.size for p in model.params.values()))

## A tri-parallel batch: source x, target y, synthetic auxiliary source z
## (token 4 stands in for the target-language tag)
xs = [[4, 10, 11, 12], [4, 13, 14]]
zs = [[4, 20, 21], [4, 22, 23, 24, 25]]
ys = [[30, 31, EOS], [32, EOS]]
batch = TriBatch.from_ids(xs, ys, zs)

## The four terms and their sum
br = loss_total(model, batch, AgreementConfig(alpha=0.5))
for name, value in br.as_floats().items():
    print(f"{name:>10s} {value:.6f}")

## With z identical to x both KL directions vanish and the auxiliary loss equals the main loss
same = TriBatch(batch.src_x, batch.tgt_in, batch.tgt_out, batch.src_x)
print("z = x:", loss_total(model, same, AgreementConfig()).as_floats())

## Ablations drop terms; "both" keeps main + auxiliary only
for which in ("kl1", "kl2", "both", "main-only"):
    f = loss_total(model, batch, AgreementConfig.ablated(which)).as_floats()
    print(f"ablate {which:>9s}: total {f['total']:.6f}  bma {f['bma']:.6f}")

## Gradients flow into both source-conditioned passes
model.zero_grad()
nx.backward(br.total)
norm = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in model.params.values()))
print("gradient norm:", norm)

## The smallest reachable label-smoothed loss for this vocabulary
print("smoothing floor (V=40, 0.1):", smoothing_floor(40, 0.1))
