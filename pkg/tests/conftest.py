import numpy as np
import pytest

from lwisp.data import SampleCache, make_synthetic_dataset


def naive_conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Direct six-loop convolution used as an independent oracle."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, r * stride + u * dilation, c * stride + v * dilation] * w[o, ci, u, v]
                    out[i, o, r, c] = acc
    return out


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    make_synthetic_dataset(root, 8, 64, seed=0, split="train")
    make_synthetic_dataset(root, 2, 64, seed=1000, split="val")
    return root


@pytest.fixture(scope="session")
def train_samples(synth_root):
    from lwisp.data import DatasetManifest

    return SampleCache(DatasetManifest.load(synth_root, "train")).samples


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
