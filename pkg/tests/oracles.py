"""Independent reference implementations, written as plain loops over pixels.

They share no code with the package and favour obviousness over speed.
"""

import math

import numpy as np


def mse_loop(a, b):
    total, n = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            d = float(a[i, j]) - float(b[i, j])
            total += d * d
            n += 1
    return total / n


def psnr_loop(a, b, cap=100.0):
    m = mse_loop(a, b)
    if m == 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / m))


def rmse_loop(a, b):
    return math.sqrt(mse_loop(a, b))


def ssim_loop(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Mean SSIM over every fully-contained win x win window, 2-D Gaussian weights built directly."""
    c = (win - 1) / 2.0
    w = np.zeros((win, win))
    for u in range(win):
        for v in range(win):
            w[u, v] = math.exp(-((u - c) ** 2 + (v - c) ** 2) / (2 * sigma * sigma))
    w /= w.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i:i + win, j:j + win].astype(np.float64)
            pb = b[i:i + win, j:j + win].astype(np.float64)
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def dice_sen_spec_loop(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        p, t = bool(p), bool(t)
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    def ratio(num, den, empty):
        return (1.0 if empty else 0.0) if den == 0 else num / den
    return (ratio(2 * tp, 2 * tp + fp + fn, tp + fp + fn == 0),
            ratio(tp, tp + fn, tp + fp == 0),
            ratio(tn, tn + fp, tn + fn == 0))


def bce_loop(logits, target):
    """Mean binary cross-entropy of sigmoid(logits) against a constant target."""
    total = 0.0
    flat = np.ravel(logits)
    for z in flat:
        p = 1.0 / (1.0 + math.exp(-float(z)))
        p = min(max(p, 1e-300), 1 - 1e-16)
        total += -(target * math.log(p) + (1 - target) * math.log(1 - p))
    return total / len(flat)


def patchgan_grid(resolution, n_layers=3):
    """Decision-grid side from conv arithmetic: 4x4 kernels, pad 1, strides 2 (n_layers times), 1, 1."""
    h = resolution
    for stride in [2] * n_layers + [1, 1]:
        h = (h + 2 * 1 - 4) // stride + 1
    return h


def patchgan_receptive_field(n_layers=3):
    """Receptive field of one logit, walked backwards through the same schedule."""
    rf = 1
    for stride in reversed([2] * n_layers + [1, 1]):
        rf = (rf - 1) * stride + 4
    return rf


def conv_params(cin, cout, k, bias=True):
    return cin * cout * k * k + (cout if bias else 0)


def unet_param_count(base, depth, cin=1, n_classes=4):
    """Exact U-Net parameter count: double 3x3 convs with BatchNorm, 2x2 transposed-conv up, 1x1 head."""
    chans = [base * 2**i for i in range(depth)]
    total = 0
    prev = cin
    for c in chans:
        total += conv_params(prev, c, 3) + 2 * c + conv_params(c, c, 3) + 2 * c
        prev = c
    for i in reversed(range(depth - 1)):
        total += conv_params(chans[i + 1], chans[i], 2)
        total += conv_params(2 * chans[i], chans[i], 3) + 2 * chans[i] + conv_params(chans[i], chans[i], 3) + 2 * chans[i]
    total += conv_params(chans[0], n_classes, 1)
    return total


def lr_table(lr, epochs):
    """Schedule written out epoch by epoch: flat for the first half, then equal decrements to zero."""
    half = epochs // 2
    out = []
    for e in range(epochs):
        if e < half:
            out.append(lr)
        else:
            steps_into_decay = e - half + 1
            out.append(lr * (half - steps_into_decay) / half)
    return out


def t_interval(fold_means):
    """95% Student-t half-width, critical values from a fixed table (df 1..10)."""
    t975 = {1: 12.706204736, 2: 4.302652730, 3: 3.182446305, 4: 2.776445105, 5: 2.570581836,
            6: 2.446911851, 7: 2.364624252, 8: 2.306004135, 9: 2.262157163, 10: 2.228138852}
    n = len(fold_means)
    m = sum(fold_means) / n
    sd = math.sqrt(sum((x - m) ** 2 for x in fold_means) / (n - 1))
    return m, t975[n - 1] * sd / math.sqrt(n)
