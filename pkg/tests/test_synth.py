import json

import numpy as np

from gaec.grid import read_field
from gaec.roi import read_mask, read_points
from gaec.synth import SynthParams, generate

SMALL = SynthParams(shape=(4, 48, 40))


def test_deterministic():
    a, b = generate(SMALL), generate(SMALL)
    for name in a.fields:
        assert np.array_equal(a.fields[name].data, b.fields[name].data)
    assert np.array_equal(a.roi_mask, b.roi_mask)
    c = generate(SynthParams(seed=8, shape=SMALL.shape))
    assert not np.array_equal(a.fields["psl"].data, c.fields["psl"].data)


def test_contents():
    corpus = generate(SMALL)
    assert set(corpus.fields) == {"psl", "tvq", "tuq", "ivt"}
    assert abs(corpus.roi_mask.mean() - 0.10) < 0.01
    ivt = np.hypot(corpus.fields["tvq"].data.astype(np.float64), corpus.fields["tuq"].data)
    assert np.allclose(corpus.fields["ivt"].data, ivt, rtol=1e-6)
    assert len(corpus.tc_points) == SMALL.n_tc * SMALL.shape[0]
    assert corpus.ar_mask.any()


def test_write(tmp_path):
    corpus = generate(SMALL)
    files = corpus.write(tmp_path)
    assert np.array_equal(read_field(tmp_path / files["psl"]).data, corpus.fields["psl"].data)
    assert np.array_equal(read_mask(tmp_path / "roi_mask.bits"), corpus.roi_mask)
    assert len(read_points(tmp_path / "tc_points.csv")) == len(corpus.tc_points)
    desc = json.loads((tmp_path / "corpus.json").read_text())
    assert desc["params"]["seed"] == 7
