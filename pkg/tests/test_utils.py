import csv

from replaysim import utils
from replaysim.utils import Stream


def test_derive_seed_is_stable_and_separates_keys():
    assert utils.derive_seed(0, Stream.REHEARSAL, 2, 5) == utils.derive_seed(0, Stream.REHEARSAL, 2, 5)
    seeds = {
        utils.derive_seed(0, Stream.REHEARSAL, 2, 5),
        utils.derive_seed(0, Stream.REHEARSAL, 5, 2),
        utils.derive_seed(1, Stream.REHEARSAL, 2, 5),
        utils.derive_seed(0, Stream.PROBE, 2, 5),
    }
    assert len(seeds) == 4


def test_make_rng_streams():
    a = utils.make_rng(3, Stream.DATA).standard_normal(4)
    b = utils.make_rng(3, Stream.DATA).standard_normal(4)
    c = utils.make_rng(3, Stream.SPLIT).standard_normal(4)
    assert (a == b).all()
    assert not (a == c).all()


def test_statistics():
    assert abs(utils.mean_value([0.8, 0.9]) - 0.85) < 1e-12
    assert utils.stdev_value([0.5]) == 0.0
    assert abs(utils.stdev_value([0.8, 0.9]) - 0.05) < 1e-12
    assert utils.speedup(10.0, 2.0) == 5.0
    assert utils.speedup(10.0, 0.0) == 0.0
    assert not utils.is_finite(float("inf"))


def test_save_results_csv_appends_and_expands(tmp_path):
    path = str(tmp_path / "out" / "sweep.csv")
    utils.save_results_csv({"axis": "scale", "value": 0.5}, path, ["axis", "value"])
    utils.save_results_csv({"axis": "scale", "value": 1.0, "speedup": 2.0}, path, ["axis", "value"])

    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["axis", "value", "speedup"]
    assert rows[0] == {"axis": "scale", "value": "0.5", "speedup": ""}
    assert rows[1] == {"axis": "scale", "value": "1", "speedup": "2"}
