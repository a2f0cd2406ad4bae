"""
Synthetic aerial scenes, default boxes and matching
===================================================

Generates one source and one target scene, shows how ground truths are
matched to the 128 default boxes of the small detector, and decodes a box
back from its regression target.
"""

import tempfile

import numpy as np

from predalign import synthdomains as sd
from predalign.detector import (DetectorModel, decode_box, encode_box, hard_negative_mining,
                                match_gt_to_defaults)

source, target = sd.domain_pair(0.2)
src = sd.generate_scene(source, seed=0, domain="source")
tgt = sd.generate_scene(target, seed=0, domain="target", scene_id=1)
print("source mean intensity %.3f, target %.3f" % (src.image.mean(), tgt.image.mean()))
print("vehicles in the source scene:\n", src.boxes)

model = DetectorModel()
defaults = model.defaults
print("default boxes:", len(defaults), "templates per cell:", defaults.num_templates)

assignment, positive = match_gt_to_defaults(src.boxes, defaults)
print("positives:", int(positive.sum()), "-> gt index", assignment[positive])

# regression targets round-trip exactly
i = int(np.flatnonzero(positive)[0])
gt = src.boxes[assignment[i]]
gt_c = np.r_[(gt[:2] + gt[2:]) / 2, gt[2:] - gt[:2]]
offsets = encode_box(gt_c, defaults.boxes[i])
print("offsets", np.round(offsets, 3), "decode", decode_box(offsets, defaults.boxes[i]), "gt", gt_c)

# three negatives per positive go into the confidence loss
rng = np.random.default_rng(0)
mask = hard_negative_mining(rng.uniform(size=len(defaults)), positive)
print("hard negatives:", int(mask.sum()))

# rotations used for augmentation keep every box glued to its pixels
rot = sd.rotate_augment(src, 90)
print("box 0 before", src.boxes[0], "after 90 degrees", rot.boxes[0])

# PPM images plus one JSON file; any image viewer opens the scenes
with tempfile.TemporaryDirectory() as d:
    sd.save_dataset([src, tgt], d)
    print("reloaded", len(sd.load_dataset(d)), "scenes")
