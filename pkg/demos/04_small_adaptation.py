"""
A small adaptation run
======================

Pretrain on bright source scenes, then compare three ways of reaching the
darker target domain: no adaptation, plain adversarial alignment on both
features and predictions, and prediction alignment with class weight
normalisation. Budgets are cut to a minute or two on one core and only one
seed is used, so the numbers are noisy. The full desk-scale run is
``predalign experiment``.
"""

from predalign import synthdomains as sd
from predalign import trainloop as tl

src, tgt = sd.domain_pair(0.2)
data = tl.Datasets(
    sd.generate_dataset(sd.DatasetSpec("source_train", 64, 0), src),
    sd.generate_dataset(sd.DatasetSpec("target_train_unlabeled", 64, 10_000), tgt),
    sd.generate_dataset(sd.DatasetSpec("target_test", 24, 20_000), tgt),
    sd.generate_dataset(sd.DatasetSpec("target_labels", 16, 30_000), tgt),
)

config = tl.TrainConfig(pretrain_iterations=800, pretrain_milestones=(600,),
                        da_iterations=300, da_milestones=(210,))
pretrained = tl.pretrain_source(config, data.source_train)

# source accuracy tells us the detector learned something before any shift
source_test = sd.generate_dataset(sd.DatasetSpec("target_test", 24, 40_000), src)  # labelled role, source look
print("source-domain AP %.3f" % tl.evaluate(pretrained, source_test)[0].AP)

for mode in ("without_da", "plain_adv", "norm_p"):
    history = []
    model = tl.adapt(pretrained, config.for_mode(mode), data, history=history)
    report, _ = tl.evaluate(model, data.target_test)
    line = f"{mode:>11}: target AP {report.AP:.3f}  F1 {report.F1:.3f}"
    if history:
        line += f"  last detector-step loss {history[-1][1]:.3f}"
    print(line)
