import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv3d(x, w, b, stride=1, padding=0, dilation=1):
    """Direct nested-loop convolution, float64."""
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3).astype(np.float64)
    ext = dilation * (k - 1) + 1
    od = (d + 2 * padding - ext) // stride + 1
    oh = (h + 2 * padding - ext) // stride + 1
    ow = (wd + 2 * padding - ext) // stride + 1
    out = np.zeros((n, cout, od, oh, ow))
    for bi in range(n):
        for o in range(cout):
            for z in range(od):
                for y in range(oh):
                    for q in range(ow):
                        acc = 0.0 if b is None else float(b[o])
                        for c in range(cin):
                            for a in range(k):
                                for e in range(k):
                                    for f in range(k):
                                        acc += w[o, c, a, e, f] * xp[
                                            bi, c,
                                            z * stride + a * dilation,
                                            y * stride + e * dilation,
                                            q * stride + f * dilation,
                                        ]
                        out[bi, o, z, y, q] = acc
    return out


def naive_transposed_conv3d(x, w, stride):
    """Scatter-accumulate oracle for transposed convolution, float64."""
    n, cin, d, h, wd = x.shape
    _, cout, k, _, _ = w.shape
    out = np.zeros((n, cout, (d - 1) * stride + k, (h - 1) * stride + k, (wd - 1) * stride + k))
    for bi in range(n):
        for c in range(cin):
            for z in range(d):
                for y in range(h):
                    for q in range(wd):
                        out[bi, :, z * stride:z * stride + k, y * stride:y * stride + k,
                            q * stride:q * stride + k] += x[bi, c, z, y, q] * w[c]
    return out


def central_diff(f, arr, h):
    """Numerical gradient of scalar f() w.r.t. every entry of arr (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad
