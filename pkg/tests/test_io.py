import math

import numpy as np
import pytest

from beamgrid import channel as ch
from beamgrid import gridio as io
from beamgrid import predictor as pr
from beamgrid import scene as sc
from beamgrid.errors import GridParseError
from beamgrid.metrics import EvalReport


class TestGridFormat:
    def test_f32_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(0, 1, (5, 7, 3)).astype(np.float32)
        path = tmp_path / "a.bgrd"
        io.write_grid(path, arr, "f32")
        back = io.read_grid(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)
        io.write_grid(tmp_path / "b.bgrd", back, "f32")
        assert (tmp_path / "a.bgrd").read_bytes() == (tmp_path / "b.bgrd").read_bytes()

    def test_u8_round_trip(self, tmp_path):
        arr = np.arange(24, dtype=np.uint8).reshape(4, 6)
        path = tmp_path / "m.bgrd"
        io.write_grid(path, arr, "u8")
        back = io.read_grid(path)
        assert np.array_equal(back[:, :, 0], arr)

    def test_header_layout(self):
        data = io.grid_to_bytes(np.zeros((2, 3, 4), dtype=np.float32), "f32")
        head, payload = data.split(b"\n", 1)
        assert head == b"BGRD1 2 3 4 f32"
        assert len(payload) == 2 * 3 * 4 * 4

    def test_bad_magic_names_offset(self):
        with pytest.raises(GridParseError, match="offset 0"):
            io.grid_from_bytes(b"NOPE1 1 1 1 f32\x00")

    def test_truncated_payload_names_offset(self):
        data = io.grid_to_bytes(np.zeros((2, 2, 1), dtype=np.float32))
        with pytest.raises(GridParseError, match="expected 16 bytes"):
            io.grid_from_bytes(data[:-4])

    def test_unknown_dtype_rejected(self):
        with pytest.raises(ValueError):
            io.grid_to_bytes(np.zeros((1, 1)), "f64")


class TestPathCsv:
    def test_round_trip_bit_exact(self, tmp_path):
        hm = sc.generate_city(32, 32, seed=2)
        tx = sc.place_tx(hm, seed=2)
        chans = sc.trace_paths(hm, tx, sc.SceneConfig())
        path = tmp_path / "p.csv"
        io.write_paths_csv(path, chans)
        back = io.read_paths_csv(path, 32, 32)
        assert np.array_equal(back.counts, chans.counts)
        assert np.array_equal(back.magnitude, chans.magnitude)
        assert np.array_equal(back.phase, chans.phase)
        assert np.array_equal(back.aoa_azimuth, chans.aoa_azimuth)
        assert back.has_direct is None  # metadata does not survive the CSV

    def test_out_of_grid_pixel_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(io.PATH_HEADER + "\n9,0,1.0,0.0,0.0,0.0,0.0\n")
        with pytest.raises(GridParseError, match=r"\(9,0\) outside"):
            io.read_paths_csv(path, 4, 4)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(GridParseError):
            io.read_paths_csv(path, 4, 4)

    def test_malformed_field_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(io.PATH_HEADER + "\n0,0,xyz,0.0,0.0,0.0,0.0\n")
        with pytest.raises(GridParseError, match="line 2"):
            io.read_paths_csv(path, 4, 4)


class TestRunConfig:
    def test_defaults(self):
        cfg = io.parse_config({})
        assert cfg.codebook.dims == (8, 4, 4)
        assert cfg.eval.k_list == [1, 2, 4, 8, 16, 32]
        assert cfg.budget.exclusion_threshold_db == -147.0
        assert cfg.scene.carrier_hz == 3.9e9

    def test_unknown_section_rejected(self):
        with pytest.raises(GridParseError, match="unknown config section"):
            io.parse_config({"scnee": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(GridParseError, match="unknown key"):
            io.parse_config({"codebook": {"Na": 8, "nq": 1}})

    def test_round_trip(self, tmp_path):
        cfg = io.parse_config({"scene": {"rows": 32, "cols": 48, "seed": 5},
                               "loss": {"kind": "WS", "sep": True}})
        path = tmp_path / "cfg.json"
        io.save_config(path, cfg)
        again = io.load_config(path)
        assert again == cfg

    def test_invalid_json_offset(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(GridParseError, match="offset"):
            io.load_config(path)


class TestTxSiteJson:
    def test_round_trip(self, tmp_path):
        tx = sc.TxSite((3, 4), 21.5, ch.ArrayFrame(1.25, math.pi / 4))
        path = tmp_path / "tx.json"
        io.save_tx_site(path, tx)
        back = io.load_tx_site(path)
        assert back == tx


class TestModelFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        model = pr.SoftmaxModel.create(9, (8, 4, 4), loss_kind="WS",
                                       sep=False, seed=11, epsilon=0.002)
        model.weights = rng.normal(0, 1, model.weights.shape)
        model.bias = rng.normal(0, 1, model.bias.shape)
        path = tmp_path / "m.bgmdl"
        io.save_model(path, model)
        back = io.load_model(path)
        assert back.dims == (8, 4, 4)
        assert back.loss_kind == "WS" and back.seed == 11
        assert back.epsilon == 0.002
        np.testing.assert_array_equal(
            back.weights, model.weights.astype(np.float32).astype(np.float64))

    def test_detection(self, tmp_path):
        model = pr.SoftmaxModel.create(4, (2, 2, 2))
        mpath = tmp_path / "m.bgmdl"
        io.save_model(mpath, model)
        gpath = tmp_path / "g.bgrd"
        io.write_grid(gpath, np.zeros((2, 2, 8), dtype=np.float32))
        assert io.is_model_file(mpath)
        assert not io.is_model_file(gpath)

    def test_save_is_deterministic(self, tmp_path):
        model = pr.SoftmaxModel.create(4, (2, 2, 2), seed=5)
        io.save_model(tmp_path / "a", model)
        io.save_model(tmp_path / "b", model)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


class TestCodebookFile:
    def test_round_trip_keeps_unitarity(self, tmp_path):
        cb = ch.dft_codebook(8, 4, 4)
        path = tmp_path / "cb.json"
        io.save_codebook(path, cb)
        back = io.load_codebook(path)
        assert np.array_equal(back.tx_azimuth, cb.tx_azimuth)
        assert np.array_equal(back.tx_elevation, cb.tx_elevation)
        assert back.nr == 4

    def test_config_selects_custom_weights(self, tmp_path):
        cb = ch.dft_codebook(4, 2, 2)
        path = tmp_path / "cb.json"
        io.save_codebook(path, cb)
        cfg = io.parse_config({"codebook": {"Na": 4, "Ne": 2, "Nr": 2,
                                            "tx_weights": str(path)}})
        loaded = io.codebook_from_config(cfg)
        assert np.array_equal(loaded.tx_azimuth, cb.tx_azimuth)

    def test_dim_mismatch_rejected(self, tmp_path):
        cb = ch.dft_codebook(4, 2, 2)
        path = tmp_path / "cb.json"
        io.save_codebook(path, cb)
        cfg = io.parse_config({"codebook": {"Na": 8, "Ne": 4, "Nr": 4,
                                            "tx_weights": str(path)}})
        with pytest.raises(GridParseError, match="do not match"):
            io.codebook_from_config(cfg)

    def test_default_is_dft(self):
        cfg = io.parse_config({})
        cb = io.codebook_from_config(cfg)
        assert np.array_equal(cb.tx_azimuth, ch.dft_codebook(8, 4, 4).tx_azimuth)


class TestReport:
    def test_round_trip(self, tmp_path):
        rep = EvalReport(k_list=[1, 2], accuracy=[0.5, 0.75],
                         tpr=[0.8, 0.9], samples=100, excluded=20)
        path = tmp_path / "r.json"
        io.save_report(path, rep)
        back = io.load_report(path)
        assert back == rep

    def test_table_layout(self):
        rep = EvalReport(k_list=[1, 8], accuracy=[0.25, 0.875],
                         tpr=[0.5, 1.0], samples=64, excluded=0)
        table = io.render_table(rep)
        lines = table.splitlines()
        assert lines[0].startswith("metric")
        assert "top-1" in lines[0] and "top-8" in lines[0]
        assert "0.2500" in lines[1] and "1.0000" in lines[2]
        assert "samples: 64" in lines[3]


class TestPgm:
    def test_binary_graymap(self, tmp_path):
        img = np.array([[0, 128], [255, 64]], dtype=np.uint8)
        path = tmp_path / "x.pgm"
        io.write_pgm(path, img)
        data = path.read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert data[-4:] == bytes([0, 128, 255, 64])
