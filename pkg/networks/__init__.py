import os
from ast import literal_eval as make_tuple
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import yaml

from eyeshift.config import AblationFlags
from eyeshift.errors import ConfigError, ModelError
from eyeshift.imagecore import INFLATE_FRACTION, MaskPair, crop_regions, hflip, mask_tensor
from eyeshift.layers import (ResidualBlock, UpBlock, conv_block, down_block, flat_size,
                             init_weights, probe_shapes, sn_linear)
from eyeshift.pytorch_utils import count_parameters

PROFILE_DIR = os.path.dirname(os.path.abspath(__file__))


def load_network_spec(yaml_path):
    with open(yaml_path, 'r') as f:
        network_spec = yaml.safe_load(f)

    def convert(v):
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        if isinstance(v, str) and v.startswith('('):
            # convert e.g. the string "(16, 24)" to the tuple (16, 24)
            return make_tuple(v)
        return v
    return convert(network_spec)


@dataclass(frozen=True)
class Profile(object):
    """Architecture and geometry of one resolution preset (see ``networks/*.yaml``)."""
    name: str
    image_size: tuple
    mask_size_low: tuple
    mask_size_high: tuple
    angle_dim: int
    content_dim: int
    generator: dict
    eye_encoder: dict
    refiner: dict
    discriminator: dict
    render: dict = None

    @property
    def low_size(self):
        return (self.image_size[0] // 2, self.image_size[1] // 2)

    @property
    def eye_crop_size(self):
        """Size of the inflated high-resolution crops seen by the local refiner critic."""
        h, w = self.mask_size_high
        return (h + 2 * int(round(INFLATE_FRACTION * h)), w + 2 * int(round(INFLATE_FRACTION * w)))

    def masks_low(self, masks_h):
        """Low-resolution masks: centers halved, sizes from the profile."""
        if isinstance(masks_h, MaskPair):
            return masks_h.rescaled(self.mask_size_low, self.low_size)
        return [self.masks_low(m) for m in masks_h]

    def validate(self):
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 2 or w % 2:
            raise ConfigError('image_size must be positive and even, got {}'.format(self.image_size))
        if self.angle_dim <= 0 or self.content_dim <= 0:
            raise ConfigError('code dimensions must be positive')
        for part in ('generator', 'eye_encoder', 'refiner', 'discriminator'):
            for key, value in getattr(self, part).items():
                if not isinstance(value, int) or value < 0 or (value == 0 and not key.startswith('n_')):
                    raise ConfigError('{}.{} must be a positive integer, got {!r}'.format(part, key, value))
        for name, size, bounds in (('mask_size_low', self.mask_size_low, self.low_size),
                                   ('mask_size_high', self.mask_size_high, self.image_size)):
            if not (0 < size[0] <= bounds[0] and 0 < size[1] <= bounds[1]):
                raise ConfigError('{} {} does not fit {}'.format(name, size, bounds))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ('image_size', 'mask_size_low', 'mask_size_high'):
            d[key] = tuple(d[key])
        return cls(**d)


def load_profile(name='desk'):
    """Load a profile by name (``desk``, ``hq``, ``mini``) or from a YAML path."""
    path = name if name.endswith('.yaml') else os.path.join(PROFILE_DIR, name + '.yaml')
    if not os.path.exists(path):
        raise ConfigError('unknown profile %r' % name)
    try:
        profile = Profile(**load_network_spec(path))
    except TypeError as e:
        raise ConfigError('malformed profile {}: {}'.format(path, e))
    profile.validate()
    return profile


def _channels(base, i, max_channels):
    return min(base * 2 ** i, max_channels)


class EyeEncoder(nn.Module):
    """Eye crop -> code vector. Serves as E_r and as the encoder half (E_c) of the mirror autoencoder."""

    def __init__(self, crop_size, code_dim, base_channels, n_down, max_channels):
        super(EyeEncoder, self).__init__()
        self.crop_size = tuple(crop_size)
        layers = [conv_block(3, base_channels, 7, padding=3)]
        ch = base_channels
        for i in range(n_down):
            out = _channels(base_channels, i + 1, max_channels)
            layers.append(down_block(ch, out))
            ch = out
        self.layers = nn.ModuleList(layers)
        self.shapes = probe_shapes(self.layers, (3,) + self.crop_size)
        self.linear = nn.Linear(flat_size(self.shapes[-1]), code_dim)

    def forward(self, crop):
        if crop.dim() != 4 or tuple(crop.shape[1:]) != (3,) + self.crop_size:
            raise ModelError('eye encoder expects (N, 3, {}, {}) crops, got {}'.format(
                self.crop_size[0], self.crop_size[1], tuple(crop.shape)))
        x = crop
        for layer in self.layers:
            x = layer(x)
        return self.linear(x.view(x.shape[0], -1))


class EyeDecoder(nn.Module):
    """Code vector -> eye crop, mirroring an EyeEncoder's feature shapes."""

    def __init__(self, code_dim, encoder_shapes):
        super(EyeDecoder, self).__init__()
        self.start_shape = encoder_shapes[-1]
        self.linear = nn.Linear(code_dim, flat_size(self.start_shape))
        self.ups = nn.ModuleList([
            UpBlock(encoder_shapes[i + 1][0], encoder_shapes[i][0], encoder_shapes[i][1:])
            for i in reversed(range(len(encoder_shapes) - 1))])
        self.out = nn.Sequential(nn.Conv2d(encoder_shapes[0][0], 3, 7, padding=3), nn.Tanh())

    def forward(self, code):
        x = torch.relu(self.linear(code)).view(code.shape[0], *self.start_shape)
        for up in self.ups:
            x = up(x)
        return self.out(x)


class MirrorAutoencoder(nn.Module):
    """G_pre: eye crop -> content code -> eye crop, pretrained on mirrored eye pairs."""

    def __init__(self, crop_size, content_dim, base_channels, n_down, max_channels):
        super(MirrorAutoencoder, self).__init__()
        self.encoder = EyeEncoder(crop_size, content_dim, base_channels, n_down, max_channels)
        self.decoder = EyeDecoder(content_dim, self.encoder.shapes)

    def encode(self, crop):
        return self.encoder(crop)

    def forward(self, crop):
        return self.decoder(self.encoder(crop))


class InpaintGenerator(nn.Module):
    """Masked image + mask channel + code vector -> image in which only the masked pixels change.

    U-Net encoder/decoder; the code is broadcast over the bottleneck grid and
    channel-concatenated before the residual blocks.
    """

    def __init__(self, image_size, code_dim, base_channels, n_down, max_channels, n_res):
        super(InpaintGenerator, self).__init__()
        self.image_size = tuple(image_size)
        self.code_dim = code_dim
        downs = [conv_block(4, base_channels, 7, padding=3)]
        ch = base_channels
        for i in range(n_down):
            out = _channels(base_channels, i + 1, max_channels)
            downs.append(down_block(ch, out))
            ch = out
        self.downs = nn.ModuleList(downs)
        self.shapes = probe_shapes(self.downs, (4,) + self.image_size)

        self.fuse = conv_block(ch + code_dim, ch, 1, activation='relu')
        self.res = nn.Sequential(*[ResidualBlock(ch) for _ in range(n_res)])
        ups = []
        for i in reversed(range(n_down)):
            skip_ch = self.shapes[i][0]
            ups.append(UpBlock(ch + skip_ch, skip_ch, self.shapes[i][1:]))
            ch = skip_ch
        self.ups = nn.ModuleList(ups)
        self.out = nn.Sequential(nn.Conv2d(ch, 3, 7, padding=3), nn.Tanh())

    def forward(self, masked, mask, codes):
        if masked.dim() != 4 or tuple(masked.shape[1:]) != (3,) + self.image_size:
            raise ModelError('generator expects (N, 3, {}, {}) images, got {}'.format(
                self.image_size[0], self.image_size[1], tuple(masked.shape)))
        if codes.shape != (masked.shape[0], self.code_dim):
            raise ModelError('generator expects codes of shape {}, got {}'.format(
                (masked.shape[0], self.code_dim), tuple(codes.shape)))
        x = torch.cat([masked, mask], dim=1)
        feats = []
        for layer in self.downs:
            x = layer(x)
            feats.append(x)
        code_map = codes[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        x = self.res(self.fuse(torch.cat([x, code_map], dim=1)))
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            x = up(x, skip)
        return masked * (1 - mask) + self.out(x) * mask


class LocalRefiner(nn.Module):
    """G_h: high-resolution eye crop -> residual crop in [-1, 1]."""

    def __init__(self, crop_size, base_channels, n_down, max_channels, n_res):
        super(LocalRefiner, self).__init__()
        self.crop_size = tuple(crop_size)
        downs = [conv_block(3, base_channels, 3, padding=1)]
        ch = base_channels
        for i in range(n_down):
            out = _channels(base_channels, i + 1, max_channels)
            downs.append(down_block(ch, out))
            ch = out
        self.downs = nn.Sequential(*downs)
        shapes = probe_shapes(downs, (3,) + self.crop_size)
        self.res = nn.Sequential(*[ResidualBlock(ch) for _ in range(n_res)])
        ups = []
        for i in reversed(range(n_down)):
            ups.append(UpBlock(ch, shapes[i][0], shapes[i][1:]))
            ch = shapes[i][0]
        self.ups = nn.Sequential(*ups)
        self.out = nn.Sequential(nn.Conv2d(ch, 3, 3, padding=1), nn.Tanh())

    def forward(self, crop):
        if crop.dim() != 4 or tuple(crop.shape[-2:]) != self.crop_size:
            raise ModelError('refiner expects {} crops, got {}'.format(self.crop_size, tuple(crop.shape)))
        return self.out(self.ups(self.res(self.downs(crop))))


class CriticBranch(nn.Module):
    """Spectrally normalized stride-2 convs (no normalization) followed by a fully-connected feature."""

    def __init__(self, in_channels, in_size, base_channels, n_layers, max_channels, feature_dim):
        super(CriticBranch, self).__init__()
        layers = []
        ch = in_channels
        for i in range(n_layers):
            out = _channels(base_channels, i, max_channels)
            layers.append(down_block(ch, out, norm=False, spectral=True))
            ch = out
        self.convs = nn.Sequential(*layers)
        self.in_shape = (in_channels,) + tuple(in_size)
        shape = probe_shapes([self.convs], self.in_shape)[-1]
        self.linear = sn_linear(flat_size(shape), feature_dim)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ModelError('critic branch expects {} inputs, got {}'.format(self.in_shape, tuple(x.shape)))
        x = self.convs(x)
        return nn.functional.leaky_relu(self.linear(x.view(x.shape[0], -1)), 0.2)


def _critic_head(in_features, feature_dim):
    return nn.Sequential(sn_linear(in_features, feature_dim), nn.LeakyReLU(0.2), sn_linear(feature_dim, 1))


class GlobalLocalCritic(nn.Module):
    """D_x / D_y: whole low-resolution face plus both eye crops -> probability of being real."""

    def __init__(self, image_size, crop_size, base_channels, max_channels,
                 n_layers_global, n_layers_local, n_layers_eye, feature_dim):
        super(GlobalLocalCritic, self).__init__()
        self.global_branch = CriticBranch(3, image_size, base_channels, n_layers_global,
                                          max_channels, feature_dim)
        self.local_branch = CriticBranch(6, crop_size, base_channels, n_layers_local,
                                         max_channels, feature_dim)
        self.head = _critic_head(2 * feature_dim, feature_dim)

    def forward(self, image, crops):
        local = torch.cat([crops.left, crops.right], dim=1)
        features = torch.cat([self.global_branch(image), self.local_branch(local)], dim=1)
        return torch.sigmoid(self.head(features)).view(-1)


class LocalCritic(nn.Module):
    """D_h: inflated high-resolution eye crop -> probability of being real."""

    def __init__(self, crop_size, base_channels, max_channels,
                 n_layers_global, n_layers_local, n_layers_eye, feature_dim):
        super(LocalCritic, self).__init__()
        self.branch = CriticBranch(3, crop_size, base_channels, n_layers_eye, max_channels, feature_dim)
        self.head = _critic_head(feature_dim, feature_dim)

    def forward(self, crops):
        return torch.sigmoid(self.head(self.branch(crops))).view(-1)


class ModelSet(nn.Module):
    """The trainable networks of the system plus its ablation flags.

    With ``use_cfm`` off there is no refiner and no refiner critic (``g_h`` and
    ``d_h`` are None).
    """
    NAMES = ('g_pre', 'e_r', 'g_x', 'g_y', 'g_h', 'd_x', 'd_y', 'd_h')
    GENERATORS = ('e_r', 'g_x', 'g_y', 'g_h')
    DISCRIMINATORS = ('d_x', 'd_y', 'd_h')

    def __init__(self, profile, flags):
        super(ModelSet, self).__init__()
        self.profile = profile
        self.flags = flags
        self.global_step = 0

        crop_low = profile.mask_size_low
        self.g_pre = MirrorAutoencoder(crop_low, profile.content_dim, **profile.eye_encoder)
        self.e_r = EyeEncoder(crop_low, profile.angle_dim, **profile.eye_encoder)
        self.g_x = InpaintGenerator(profile.low_size, 2 * profile.content_dim, **profile.generator)
        self.g_y = InpaintGenerator(profile.low_size, 2 * (profile.angle_dim + profile.content_dim),
                                    **profile.generator)
        self.d_x = GlobalLocalCritic(profile.low_size, crop_low, **profile.discriminator)
        self.d_y = GlobalLocalCritic(profile.low_size, crop_low, **profile.discriminator)
        if flags.use_cfm:
            self.g_h = LocalRefiner(profile.mask_size_high, **profile.refiner)
            self.d_h = LocalCritic(profile.eye_crop_size, **profile.discriminator)
        else:
            self.g_h = None
            self.d_h = None

    def named_networks(self, names=None):
        names = self.NAMES if names is None else names
        return [(n, getattr(self, n)) for n in names if getattr(self, n) is not None]

    def networks(self, names):
        return [net for _, net in self.named_networks(names)]

    def encode_content(self, crop):
        """E_c; the zero vector when PAM conditioning is ablated."""
        code = self.g_pre.encode(crop)
        if not self.flags.use_pam_content:
            return torch.zeros_like(code)
        return code

    def encode_angle(self, crop):
        return self.e_r(crop)

    def content_codes(self, crops):
        return torch.cat([self.encode_content(crops.left), self.encode_content(crops.right)], dim=1)

    def angle_codes(self, crops):
        """Per-eye angle codes, left||right; the left crop is mirrored so one encoder serves both eyes."""
        return torch.cat([self.encode_angle(hflip(crops.left)), self.encode_angle(crops.right)], dim=1)

    def inpaint_x(self, masked, masks, c_codes):
        return self.g_x(masked, mask_tensor(masked, masks), c_codes)

    def inpaint_y(self, masked, masks, r_codes, c_codes):
        return self.g_y(masked, mask_tensor(masked, masks), torch.cat([r_codes, c_codes], dim=1))

    def discriminate_global_local(self, critic, image, masks):
        return critic(image, crop_regions(image, masks))

    def discriminate_local(self, crops):
        return self.d_h(crops)


def build_model_set(profile='desk', flags=None, seed=0):
    """Build every network of a profile with N(0, 0.02) weights and zero biases, seeded by *seed*."""
    if isinstance(profile, str):
        profile = load_profile(profile)
    flags = AblationFlags() if flags is None else flags
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        try:
            models = ModelSet(profile, flags)
        except RuntimeError as e:
            raise ConfigError('profile {} yields inconsistent layer shapes: {}'.format(profile.name, e))
        init_weights(models)
    return models


def count_params(model):
    """Trainable scalar count of a module, or per-network counts plus 'total' for a ModelSet."""
    if isinstance(model, ModelSet):
        counts = {name: count_parameters(net) for name, net in model.named_networks()}
        counts['total'] = sum(counts.values())
        return counts
    return count_parameters(model)
