"""Generate the glyph dataset, sample an episode and save a contact sheet."""

import sys
from pathlib import Path

import numpy as np

from milr.data import generate_dataset, sample_episode
from milr.viz import image_to_uint8, write_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

data = generate_dataset(n_classes=10, samples_per_class=4, seed=0)
print(f"{len(data)} images of shape {data.images.shape[1:]}, classes {data.classes.tolist()}")
print(f"glyph covers {data.relevance_masks.mean():.3f} of the image, distractor {data.distractor_masks.mean():.3f}")

episode = sample_episode(data, n_way=5, k_shot=1, n_query=2, rng=np.random.default_rng(0))
print("support labels", episode.support_labels.tolist(), "query labels", episode.query_labels.tolist())

# One row per class: the first four samples of each.
rows = [np.concatenate([image_to_uint8(data.images[i]) for i in idx[:4]], axis=1)
        for idx in data.indices_by_class().values()]
print("wrote", write_png(np.concatenate(rows, axis=0), out / "glyphs.png"))
