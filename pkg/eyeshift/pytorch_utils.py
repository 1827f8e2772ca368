import hashlib
from contextlib import contextmanager

import numpy as np
import torch
import torchvision.utils as vutils


def set_requires_grad(modules, flag):
    for module in modules:
        if module is None:
            continue
        for p in module.parameters():
            p.requires_grad_(flag)


@contextmanager
def evaluating(*modules):
    """Switch *modules* to eval mode (and disable autograd) for the duration of the block."""
    previous = [m.training for m in modules]
    try:
        for m in modules:
            m.eval()
        with torch.no_grad():
            yield
    finally:
        for m, mode in zip(modules, previous):
            m.train(mode)


def count_parameters(module):
    """Trainable scalar count; buffers (power-iteration vectors) are not parameters."""
    return int(sum(p.numel() for p in module.parameters()))


def parameter_checksum(module):
    """sha256 over every parameter and buffer of *module*, in state_dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode('utf-8'))
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def to_display(images):
    """Map [-1, 1] images to [0, 1] for tensorboard."""
    return (images.detach().cpu().clamp(-1, 1) + 1) / 2


class NetworkDumper(object):
    def __init__(self, writer, model):
        self.writer = writer
        self.model = model

    def histogram(self, prefix='', t=0):
        params = self.model.named_parameters()
        for name, param in params:
            self.writer.add_histogram(prefix+name,
                                      param.cpu().detach().numpy().flatten(),
                                      t)

    def samples(self, rows, title='samples', t=0):
        """Write a grid with one row per entry of *rows*, each a (N, 3, H, W) batch at the same size."""
        grid = vutils.make_grid(torch.cat([to_display(r) for r in rows], dim=0),
                                nrow=rows[0].shape[0], padding=2)
        self.writer.add_image(title, grid, t)
