"""Train a small prototypical encoder and watch few-shot accuracy climb."""

import numpy as np

from milr.data import generate_dataset
from milr.protonet import ProtonetConfig, train_protonet

data = generate_dataset(n_classes=10, samples_per_class=20, seed=0)
encoder, log = train_protonet(data, ProtonetConfig(episodes=400), seed=0)
acc = np.array([a for _, _, a in log])
for start in range(0, len(acc), 100):
    print(f"episodes {start:4d}-{start + 99:4d}: mean query accuracy {acc[start:start + 100].mean():.3f}")
print(f"{encoder.num_parameters()} parameters")
