"""Shared helpers for the test suite.

The gradient checks compare analytic gradients against central finite
differences. The losses are piecewise smooth: bilinear interpolation has
kinks at integer sample coordinates, the Parzen window is truncated at
three standard deviations, and the leaky ReLU bends at zero. A two-sided
difference straddling such a point measures nothing, so the samplers
below keep the checked coordinates a safe margin away from them; the
gradient is only defined where the function is differentiable.
"""

import numpy as np

from mmreg.rng import Xoshiro256pp

FD_STEP = 1e-5


def central_diff(f, x, coords, step=FD_STEP):
    """Finite-difference gradient of scalar ``f`` at flat ``coords`` of ``x``.

    ``x`` must be a C-contiguous float64 array; it is restored after use.
    """
    assert x.dtype == np.float64 and x.flags["C_CONTIGUOUS"]
    flat = x.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    for n, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f(x)
        flat[idx] = orig - step
        fm = f(x)
        flat[idx] = orig
        out[n] = (fp - fm) / (2.0 * step)
    return out


def assert_grad_close(analytic, numeric, rtol, floor=1e-6):
    """Per-coordinate relative error, floored so near-zero entries
    compare absolutely."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    assert rel.max() < rtol, (
        f"max rel err {rel.max():.3e} at coord {worst}: "
        f"analytic {analytic[worst]:.6e}, numeric {numeric[worst]:.6e}"
    )


def random_image(seed, h, w, lo=0.05, hi=0.95):
    """Uniform random image, kept off the exact [0,1] endpoints."""
    rng = Xoshiro256pp(seed)
    vals = 0.5 * (rng.uniform_signed_array(h * w) + 1.0)
    return (lo + (hi - lo) * vals).reshape(h, w)


def nudge_off_parzen_edges(img, bins, width, margin=5e-3):
    """Push intensities away from the Parzen truncation boundaries.

    The window weight jumps at |bin distance| = 3 * width; a value whose
    continuous bin coordinate sits within ``margin`` of such a boundary
    is moved just past it so finite differences never straddle the jump.
    """
    out = img.copy().reshape(-1)
    for _ in range(4):
        c = out * bins - 0.5
        moved = False
        for k in range(bins):
            d = k - c
            for edge in (-3.0 * width, 3.0 * width):
                near = np.abs(d - edge) < margin
                if np.any(near):
                    out[near] += 2.0 * margin / bins
                    moved = True
        if not moved:
            break
    assert not moved, "could not clear Parzen edges"
    return np.clip(out, 0.0, 1.0).reshape(img.shape)


def interior_field(seed, h, w, max_disp=2.0, margin=1.5, frac_band=(0.15, 0.85)):
    """Displacement field safe for finite differences through the warp.

    Every sample point stays ``margin`` pixels inside the image (no
    border clamping) and its fractional part inside ``frac_band`` (no
    integer-crossing kink within an FD step).
    """
    rng = Xoshiro256pp(seed)
    fld = np.empty((h, w, 2), dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    lo_f, hi_f = frac_band
    for comp, base in ((0, xs), (1, ys)):
        size = w if comp == 0 else h
        for _ in range(64):
            raw = max_disp * rng.uniform_signed_array(h * w).reshape(h, w)
            tgt = base + raw
            tgt = np.clip(tgt, margin, size - 1 - margin)
            frac = tgt - np.floor(tgt)
            bad = (frac < lo_f) | (frac > hi_f)
            tgt[bad] = np.floor(tgt[bad]) + 0.5
            frac = tgt - np.floor(tgt)
            ok = (tgt >= margin) & (tgt <= size - 1 - margin) & (frac >= lo_f) & (frac <= hi_f)
            if np.all(ok):
                fld[..., comp] = tgt - base
                break
        else:
            raise AssertionError("could not build a safe field")
    return fld


def parzen_safe_pixels(values, bins, width, margin=5e-3):
    """Boolean mask of pixels whose bin coordinate clears every
    truncation boundary by ``margin`` (in bin units)."""
    c = values.reshape(-1) * bins - 0.5
    ok = np.ones(c.size, dtype=bool)
    for k in range(bins):
        d = k - c
        ok &= np.abs(np.abs(d) - 3.0 * width) > margin
    return ok.reshape(values.shape)


def pick_coords(seed, n_total, n_pick, allowed=None):
    """Deterministic coordinate subset for spot finite-difference checks."""
    rng = Xoshiro256pp(seed)
    pool = list(range(n_total)) if allowed is None else [int(i) for i in np.nonzero(allowed)[0]]
    rng.shuffle(pool)
    return pool[: min(n_pick, len(pool))]
