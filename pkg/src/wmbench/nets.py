"""Small image-to-image networks shared by the encoder scheme, the evasion detector and adaptive synthesis."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _conv(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class UNet(nn.Module):
    """Three-level U-Net (16/32/64 channels) with skip connections.

    ``out`` selects the output head: "image" squashes to [0, 1], "residual" to [-1, 1] via tanh
    scaled by ``residual_scale``.
    """

    def __init__(self, channels=1, out_channels=None, width=16, out="image", residual_scale=1.0):
        super().__init__()
        out_channels = out_channels or channels
        w = width
        self.enc1 = _conv(channels, w)
        self.enc2 = _conv(w, 2 * w)
        self.enc3 = _conv(2 * w, 4 * w)
        self.dec2 = _conv(4 * w + 2 * w, 2 * w)
        self.dec1 = _conv(2 * w + w, w)
        self.head = nn.Conv2d(w, out_channels, 1)
        self.out = out
        self.residual_scale = residual_scale

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:]), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:]), e1], 1))
        y = self.head(d1)
        if self.out == "image":
            return torch.sigmoid(y)
        return self.residual_scale * torch.tanh(y)


class ConvAutoencoder(nn.Module):
    """Plain 3-down / 3-up convolutional autoencoder used by the key detector."""

    def __init__(self, channels=1, width=16):
        super().__init__()
        w = width
        self.down1 = nn.Conv2d(channels, w, 3, padding=1)
        self.down2 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.down3 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.up1 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.up2 = nn.Conv2d(w, w, 3, padding=1)
        self.up3 = nn.Conv2d(w, channels, 3, padding=1)

    def forward(self, x):
        h1 = F.relu(self.down1(x))
        h2 = F.relu(self.down2(h1))
        z = F.relu(self.down3(h2))
        z = F.relu(self.up1(F.interpolate(z, size=h2.shape[-2:])))
        z = F.relu(self.up2(F.interpolate(z, size=h1.shape[-2:])))
        out = self.up3(z)
        # linear head while training: a sigmoid saturates at the black MNIST background and stops learning
        return out if self.training else out.clamp(0.0, 1.0)


class Discriminator(nn.Module):
    def __init__(self, channels=1, width=16):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(channels, w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(2 * w, 1))

    def forward(self, x):
        return self.body(x).squeeze(1)


def discriminator_step(disc, opt, real, fake):
    """One update of the real/fake discriminator; returns its loss."""
    opt.zero_grad()
    lr = disc(real)
    lf = disc(fake.detach())
    loss = F.binary_cross_entropy_with_logits(lr, torch.ones_like(lr)) + \
        F.binary_cross_entropy_with_logits(lf, torch.zeros_like(lf))
    loss.backward()
    opt.step()
    return loss.item()


def fool_loss(disc, fake):
    """Non-saturating generator loss: push the discriminator to call ``fake`` real."""
    logit = disc(fake)
    return F.binary_cross_entropy_with_logits(logit, torch.ones_like(logit))


def train_indist_autoencoder(images, epochs=5, gamma=0.01, batch_size=64, lr=1e-3, seed=0):
    """Reconstruction autoencoder co-trained against a discriminator so outputs look in-distribution."""
    from .models import to_tensor
    from .seeding import seed_everything

    gen = seed_everything(seed)
    x_all = to_tensor(images)
    c = x_all.shape[1]
    ae, disc = UNet(c), Discriminator(c)
    opt_g = torch.optim.Adam(ae.parameters(), lr=lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr)
    for _ in range(epochs):
        ae.train()
        perm = torch.randperm(len(x_all), generator=gen)
        for s in range(0, len(x_all), batch_size):
            xb = x_all[perm[s:s + batch_size]]
            xr = ae(xb)
            discriminator_step(disc, opt_d, xb, xr)
            opt_g.zero_grad()
            loss = F.mse_loss(xr, xb) + gamma * fool_loss(disc, xr)
            loss.backward()
            opt_g.step()
    ae.eval()
    return ae
