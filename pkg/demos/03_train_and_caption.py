"""
Overfit eight pairs, then caption them back
===========================================

The whole training loop at desk scale: build a synthetic dataset,
train the encoder-decoder with the contrastive head for a few hundred
Adam steps, and check the model can reproduce its training captions.
Takes a few seconds on one core.
"""

from dualcap.data import make_synthetic
from dualcap.encoder import EncoderConfig
from dualcap.model import ModelConfig, build_model, set_channel_stats
from dualcap.textdec import DecoderConfig, Vocabulary
from dualcap.train import TrainConfig, caption_records, evaluate_model, fit, training_pairs

ds = make_synthetic(8, grid=16, seed=0)
vocab = Vocabulary.from_corpus([c for _, c in ds.caption_pairs("train")])
print(f"dataset: {len(ds.records)} images, vocabulary of {len(vocab)} ids")

enc = EncoderConfig(image_size=16, patch_size=4, image_channels=3, dim=16,
                    heads=2, window_patches=4, groups=4, depth=1)
dec = DecoderConfig(vocab_size=len(vocab), dim=16, heads=2, depth=1,
                    context_width=enc.feature_width)
model = build_model(ModelConfig(encoder=enc, decoder=dec, joint_dim=8), vocab, seed=1)
set_channel_stats(model, ds.mean, ds.std)

pairs = training_pairs(ds, vocab)
state, history = fit(model, pairs, TrainConfig(lr=0.003, batch_size=8), steps=400)
first, last = history[0], history[-1]
print(f"step {first.step}: total {first.total:.4f} (ce {first.ce:.4f}, contrastive {first.contrastive:.4f})")
print(f"step {last.step}: total {last.total:.4f} (ce {last.ce:.4f}, contrastive {last.contrastive:.4f})")
print(f"loss reduced by {100 * (1 - last.total / first.total):.1f}%")

print("\ngreedy captions:")
generated = caption_records(model, ds.split_records("train"), max_len=12)
for name, (hypothesis, references) in generated.items():
    mark = "=" if hypothesis == references[0] else "x"
    print(f"  {mark} {name}: {hypothesis!r} (truth {references[0]!r})")

report = evaluate_model(model, ds.split_records("train"), max_len=12)
print("\nself-eval:", report)
