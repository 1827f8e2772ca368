import os

import imageio.v2 as imageio
import numpy as np
import torch


def to_uint8(image):
    """(3, H, W) tensor in [-1, 1] -> (H, W, 3) uint8 array."""
    x = image.detach().cpu().clamp(-1, 1).numpy().transpose(1, 2, 0)
    return np.round((x + 1) * 127.5).astype(np.uint8)


def from_uint8(array):
    """(H, W, 3) uint8 array -> (3, H, W) float32 tensor in [-1, 1]."""
    x = np.asarray(array, dtype=np.float32)[..., :3] / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))


def read_png(path):
    array = imageio.imread(path)
    if array.ndim == 2:
        array = np.repeat(array[..., None], 3, axis=2)
    return from_uint8(array)


def write_png(path, image):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    imageio.imwrite(path, to_uint8(image))


def write_strip(path, images):
    """Concatenate (3, H, W) images horizontally into one PNG."""
    write_png(path, torch.cat([im.detach().cpu() for im in images], dim=-1))


def write_gif(path, images, duration=0.1):
    writer = imageio.get_writer(path, mode='I', duration=duration)
    for image in images:
        writer.append_data(to_uint8(image))
    writer.close()
