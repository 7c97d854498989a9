import json

import numpy as np
import pytest

from psido import ista, opbank, psidonet, store, tomo
from psido.errors import InvalidArgument, StorageError
from psido.wavelet import WaveletSpec


def test_pfm_round_trip_is_float32(tmp_path):
    x = np.random.default_rng(0).standard_normal((5, 7))
    store.save_pfm(tmp_path / "a.pfm", x)
    y = store.load_pfm(tmp_path / "a.pfm")
    assert y.dtype == np.float64 and y.shape == (5, 7)
    assert np.array_equal(y, x.astype(np.float32).astype(np.float64))


def test_pfm_layout_is_bottom_to_top(tmp_path):
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    store.save_pfm(tmp_path / "a.pfm", x)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    payload = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n"):], dtype="<f4")
    assert payload.tolist() == [3.0, 4.0, 1.0, 2.0]


@pytest.mark.parametrize("blob", [b"P6\n2 2\n-1.0\n" + bytes(16), b"Pf\n2 2\n-1.0\n" + bytes(10),
                                  b"Pf\nx y\n-1.0\n"])
def test_pfm_rejects_malformed(tmp_path, blob):
    (tmp_path / "bad.pfm").write_bytes(blob)
    with pytest.raises(StorageError):
        store.load_pfm(tmp_path / "bad.pfm")


def test_missing_file_is_storage_error(tmp_path):
    with pytest.raises(StorageError):
        store.load_pfm(tmp_path / "nope.pfm")


def test_sinogram_round_trip(tmp_path):
    geom = tomo.make_geometry(16, 11)
    sino = tomo.radon(np.ones((16, 16)), geom)
    store.save_sinogram(tmp_path / "s.pfm", sino, geom)
    back, g2 = store.load_sinogram(tmp_path / "s.pfm")
    assert g2 == geom and np.allclose(back, sino, rtol=1e-6)


@pytest.fixture(scope="module")
def bank():
    spec = WaveletSpec("haar", 4, 2)
    return opbank.build_filter_bank(tomo.make_geometry(16, 31), spec)


def test_bank_round_trip_is_bit_exact(tmp_path, bank):
    store.save_bank(tmp_path / "b.psdo", bank)
    back = store.load_bank(tmp_path / "b.psdo")
    assert back.hash() == bank.hash()
    assert (tmp_path / "b.psdo").read_bytes()[:4] == b"PSDO"


def test_bank_corruption_detected(tmp_path, bank):
    store.save_bank(tmp_path / "b.psdo", bank)
    raw = (tmp_path / "b.psdo").read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:4] + b"\x63\x00" + raw[6:], raw[:-8], raw + b"\0"):
        (tmp_path / "c.psdo").write_bytes(bad)
        with pytest.raises(StorageError):
            store.load_bank(tmp_path / "c.psdo")


def test_checkpoint_round_trip(tmp_path, bank):
    spec = bank.spec
    geom = tomo.make_geometry(16, 31)
    tb = opbank.truncate(bank, 4)
    net = psidonet.Network("F", spec, 4, tbank=tb)
    params = psidonet.ista_point("F", spec, 4, 2, 4, ista.IstaConfig(lam=1e-3, L=2), True, tb)
    ck = psidonet.make_checkpoint(net, params, geom, [1.0, 0.5], [2.0])
    store.save_checkpoint(tmp_path / "m.ck", ck)
    back = store.load_checkpoint(tmp_path / "m.ck")
    assert back.param_hash() == ck.param_hash()
    assert back.bank_hash == ck.bank_hash and back.geometry_hash == geom.hash()
    assert back.params.positivity and back.history == [1.0, 0.5]
    raw = (tmp_path / "m.ck").read_bytes()
    (tmp_path / "t.ck").write_bytes(raw[:-3])
    with pytest.raises(StorageError):
        store.load_checkpoint(tmp_path / "t.ck")


def test_manifest_schema(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"entries": [{"id": 1}], "geometry": {}, "noise": {}}))
    with pytest.raises(StorageError):
        store.load_manifest(tmp_path / "m.json")
    (tmp_path / "n.json").write_text("{not json")
    with pytest.raises(StorageError):
        store.load_manifest(tmp_path / "n.json")


def test_hashes():
    assert store.array_hash(np.zeros(3)) == store.array_hash(np.zeros(3))
    assert store.array_hash(np.zeros(3)) != store.array_hash(np.ones(3))
