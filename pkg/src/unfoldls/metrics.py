import math

import numpy as np


def frames_used(nt: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    # guard against 0.15 * 20 = 3.0000000000000004
    return max(1, min(nt, math.ceil(round(fraction * nt, 9))))


def mae_loss(recon, gt, fraction: float = 1.0) -> float:
    """Mean complex-modulus error over the first ``ceil(fraction * nt)`` frames."""
    recon = np.asarray(recon)
    gt = np.asarray(gt)
    if recon.shape != gt.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {gt.shape}")
    nf = frames_used(recon.shape[0], fraction)
    return float(np.mean(np.abs(recon[:nf] - gt[:nf])))


def mae(seq, ref) -> float:
    return mae_loss(seq, ref, 1.0)
