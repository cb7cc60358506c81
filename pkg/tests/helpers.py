"""Small configurations shared by the slower suites."""
from dfft.config import micro_config


def tiny_config(image_size=64, **train):
    """A narrow model that trains in well under a second per step."""
    base = dict(epochs=2, batch_size=2, checkpoint_every=1)
    base.update(train)
    return micro_config(
        image_size=image_size,
        backbone={"stages": micro_config().backbone.from_lists((8, 16, 32, 32), (1, 1, 2, 1), (1, 1, 2, 2), 4, 2.0).stages},
        encoder={"sae_width": 16, "tae_width": 32, "sae_heads": 2, "tae_heads": 2, "ffn_ratio": 2.0},
        train=base,
    )
