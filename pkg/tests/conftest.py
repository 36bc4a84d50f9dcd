import numpy as np
import pytest

from nervescan import nn
from nervescan.phantom import PhantomConfig, generate_sequence, sample_patches


@pytest.fixture(scope="session")
def trained_model(tmp_path_factory):
    """A patch classifier trained on three default phantom sequences."""
    xs, ys = [], []
    for i in range(3):
        frames, gt = generate_sequence(PhantomConfig(rng_seed=500 + i))
        x, y, _ = sample_patches(frames, gt, neg_per_frame=4, seed=i, pos_per_frame=5, pos_shift=12)
        xs.append(x)
        ys.append(y)
    net, _ = nn.train(nn.build_network(seed=0), np.concatenate(xs), np.concatenate(ys),
                      nn.TrainConfig(epochs=8, rng_seed=0))
    path = tmp_path_factory.mktemp("model") / "model.sntr"
    nn.save(net, path)
    return path
