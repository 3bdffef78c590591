import hashlib
import os
import random

import numpy as np
import torch


def root_seed(default: int = 0) -> int:
    env = os.environ.get("WMBENCH_SEED")
    return int(env) if env else default


def derive_seed(root: int, *names) -> int:
    """Stable 31-bit child seed for a named component (embed, attack, synth, labels, ...)."""
    key = ":".join([str(root), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little") & 0x7FFFFFFF


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    g = torch.Generator()
    g.manual_seed(seed)
    return g
