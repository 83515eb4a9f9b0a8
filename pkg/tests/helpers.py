from antiuav.geometry import BoundingBox, FrameState, PredictionState


def random_box(rng, lo=0.0, hi=100.0, min_size=0.5):
    x1, y1 = rng.uniform(lo, hi - min_size, size=2)
    w = rng.uniform(min_size, hi - x1)
    h = rng.uniform(min_size, hi - y1)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def random_sequence(rng, length):
    """Random (pred, gt) pair with mixed visibility and absence declarations."""
    gt, pred = [], []
    for _ in range(length):
        exist = rng.random() < 0.7
        gt.append(FrameState(bool(exist), random_box(rng) if exist else None))
        present = rng.random() < 0.6
        pred.append(PredictionState(bool(present), random_box(rng) if present else None))
    return pred, gt


def as_tuples(states):
    out = []
    for s in states:
        flag = s.exist if isinstance(s, FrameState) else s.present
        out.append((flag, s.box.as_list() if s.box is not None else None))
    return out
