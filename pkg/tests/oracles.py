"""Independent reference implementations shared by the test modules."""

import math


def oracle_eer(scores, labels) -> float:
    """Equal error rate by bisection over a continuous operating point.

    The operating point u in [0, K] accepts every trial scored at or below the
    floor(u)-th distinct score plus a fraction u - floor(u) of the trials tied
    at the next one; FPR/FNR are counted directly.
    """
    values = sorted(set(scores))
    same_total = sum(labels)
    diff_total = len(labels) - same_total

    def rates(u):
        k = int(math.floor(u))
        q = u - k
        accepted_same = accepted_diff = 0.0
        for s, l in zip(scores, labels):
            weight = 1.0 if k >= 1 and s <= values[k - 1] else (q if k < len(values) and s == values[k] else 0.0)
            if l:
                accepted_same += weight
            else:
                accepted_diff += weight
        return accepted_diff / diff_total, 1.0 - accepted_same / same_total

    lo, hi = 0.0, float(len(values))
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        fpr, fnr = rates(mid)
        if fnr - fpr > 0:
            lo = mid
        else:
            hi = mid
    fpr, fnr = rates(0.5 * (lo + hi))
    return 0.5 * (fpr + fnr)
