"""Independent reference implementations used by the tests."""
import numpy as np


def alpha_bar_bruteforce(beta):
    out, prod = [], 1.0
    for b in beta:
        prod *= 1.0 - float(b)
        out.append(prod)
    return np.array(out)


def iterate_transitions(x0, beta, t, rng):
    """x_t by applying x_s = sqrt(1 - b_s) x_{s-1} + sqrt(b_s) e_s for s = 1..t."""
    x = np.array(x0, dtype=np.float64)
    for s in range(t):
        x = np.sqrt(1.0 - beta[s]) * x + np.sqrt(beta[s]) * rng.standard_normal(x.shape)
    return x


def oracle_v(x_t, x0, abar):
    """v implied by a known clean signal: eps = (x_t - s x0) / n, v = s eps - n x0."""
    s, n = np.sqrt(abar), np.sqrt(1.0 - abar)
    eps = (x_t - s * x0) / n
    return s * eps - n * x0


def dilate_bruteforce(frame, radius):
    """Euclidean-disk dilation by explicit neighbour enumeration."""
    H, W = frame.shape
    out = np.zeros_like(frame)
    ys, xs = np.nonzero(frame)
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]
    for y, x in zip(ys, xs):
        for dy, dx in offs:
            yy, xx = y + dy, x + dx
            if 0 <= yy < H and 0 <= xx < W:
                out[yy, xx] = 1
    return out


def maxpool_bruteforce(mask, factor):
    """Latent cell is 1 iff any pixel in its factor x factor block is 1."""
    *lead, H, W = mask.shape
    out = np.zeros((*lead, H // factor, W // factor), dtype=np.float32)
    for i in range(H // factor):
        for j in range(W // factor):
            block = mask[..., i * factor:(i + 1) * factor, j * factor:(j + 1) * factor]
            out[..., i, j] = block.reshape(*lead, -1).any(-1)
    return out


def psnr_reference(a, b, peak=2.0):
    err = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if err == 0 else 10 * np.log10(peak ** 2 / err)


def ssim_reference(x, y, L=2.0, size=11, sigma=1.5):
    """Per-window SSIM by explicit loops over valid windows, averaged."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    H, W = x.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
