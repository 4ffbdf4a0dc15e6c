"""Independent reference implementations used only by tests."""

import itertools

import numpy as np

# valence -> mood lookup written out by band edges rather than comparisons
_BAND = {v: (-1 if v in range(-10, -3) else 1 if v in range(4, 11) else 0) for v in range(-10, 11)}


def brute_mode(labels):
    """Mode whose winner, among tied labels, has the largest last-occurrence index."""
    counts = {}
    last = {}
    for i, lab in enumerate(labels):
        counts[lab] = counts.get(lab, 0) + 1
        last[lab] = i
    best = max(counts.values())
    return max((lab for lab in counts if counts[lab] == best), key=lambda lab: last[lab])


def brute_chunks(valence, k=5, stride=1):
    """[(start, mood, delta)] recomputed from raw valences."""
    v = np.asarray(valence)
    out = []
    for start in range(0, len(v) - k + 1, stride):
        window = v[start:start + k]
        mood = brute_mode([_BAND[int(x)] for x in window])
        delta = int(np.sign(window[-1] - window[0]))
        out.append((start, mood, delta))
    return out


def all_label_sequences(n=5):
    return itertools.product((-1, 0, 1), repeat=n)


def textbook_pooled_t(a, b):
    """Student's t with pooled variance, from the sums-of-squares formula."""
    n1, n2 = len(a), len(b)
    m1, m2 = sum(a) / n1, sum(b) / n2
    ss1 = sum(x * x for x in a) - n1 * m1 * m1
    ss2 = sum(x * x for x in b) - n2 * m2 * m2
    sp2 = (ss1 + ss2) / (n1 + n2 - 2)
    return (m1 - m2) / (sp2 * (1 / n1 + 1 / n2)) ** 0.5, n1 + n2 - 2
