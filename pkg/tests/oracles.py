"""Deliberately naive reference implementations used as test oracles."""

import math


def brute_force_retrieval(query, query_ids, gallery, gallery_ids):
    """CMC curve and mAP by exhaustive scanning with plain Python floats."""
    n_gallery = len(gallery)
    first_hits = []
    aps = []
    for q, qid in zip(query, query_ids):
        dists = []
        for j, g in enumerate(gallery):
            dists.append((math.fsum((float(a) - float(b)) ** 2 for a, b in zip(q, g)), j))
        order = [j for _, j in sorted(dists)]
        relevant = [k for k, j in enumerate(order) if gallery_ids[j] == qid]
        first_hits.append(relevant[0])
        precisions = []
        for count, k in enumerate(relevant, start=1):
            precisions.append(count / (k + 1))
        aps.append(sum(precisions) / len(precisions))
    curve = []
    for k in range(n_gallery):
        curve.append(sum(1 for r in first_hits if r <= k) / len(first_hits))
    return curve, sum(aps) / len(aps)
