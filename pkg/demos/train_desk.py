# Train the tiny model on synthetic cracks.
#
# A short run with a few epochs, to see the loss go down. Pass the number of
# epochs as the first argument; 30 reproduces the full desk-scale setting.

import sys

from vmseg.data import SynthConfig, generate_synthetic, split_dataset
from vmseg.metrics import dice_score
from vmseg.train import TrainConfig, evaluate, train
from vmseg.vmunet import count_parameters, tiny_config

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3

data = generate_synthetic(SynthConfig(count=200, size=64, seed=0))
train_set, val_set, test_set = split_dataset(data, (0.8, 0.1, 0.1), seed=0)
print(len(train_set), "train /", len(val_set), "val /", len(test_set), "test")

cfg = tiny_config()
print("tiny model parameters:", count_parameters(cfg))

result = train(cfg, train_set, TrainConfig(epochs=epochs, seed=0), val=val_set, progress=True)

mds, miou, pairs = evaluate(result.model, test_set)
print(f"test mDS {mds:.3f}  mIoU {miou:.3f}")

# The worst image is usually one with a faint, thin crack.
worst = min(pairs, key=lambda p: dice_score(p.P, p.T))
print("hardest test image:", worst.image_id, f"DS {dice_score(worst.P, worst.T):.3f}")
