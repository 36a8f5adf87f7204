import json

import numpy as np
import pytest

from dftk import tensor_io
from dftk.cli import main
from dftk.model import config_to_dict, micro_config


@pytest.fixture()
def micro_json(tmp_path):
    path = tmp_path / "micro.json"
    path.write_text(json.dumps(config_to_dict(micro_config())))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ---------------------------------------------------------------------------
# describe / params / flops
# ---------------------------------------------------------------------------

def test_describe_tiny_reports_m_and_s(capsys):
    code, out, _ = run(capsys, "describe", "--preset", "tiny")
    assert code == 0
    assert "M=50176" in out and "S=456" in out


def test_describe_base_stage4_whole(capsys):
    code, out, _ = run(capsys, "describe", "--preset", "base",
                       "--format", "json")
    assert code == 0
    data = json.loads(out)
    stage4 = data["stages"][3]
    assert "whole(16, 7, 7)" in stage4["pyramid"]
    assert stage4["S"] == 784


def test_unknown_preset_exits_2(capsys):
    code, _, err = run(capsys, "describe", "--preset", "nano")
    assert code == 2
    assert "tiny" in err and "small" in err and "base" in err


def test_params_tiny(capsys):
    code, out, _ = run(capsys, "params", "--preset", "tiny")
    assert code == 0
    total = int(out.split("total params:")[1].split()[0].replace(",", ""))
    assert abs(total - 21.8e6) <= 0.05 * 21.8e6


def test_flops_json_schema_and_value(capsys):
    code, out, _ = run(capsys, "flops", "--preset", "tiny",
                       "--input", "32x224x224", "--format", "json")
    assert code == 0
    data = json.loads(out)
    assert abs(data["totals"]["macs"] - 60e9) <= 0.2 * 60e9
    assert abs(data["shares"]["macs"]["mlp"] - 0.5) <= 0.15
    assert {"unit", "terms", "totals", "shares", "elementwise_ops",
            "analytic", "comparisons"} <= set(data)


def test_flops_csv(capsys):
    code, out, _ = run(capsys, "flops", "--preset", "tiny", "--format", "csv")
    assert code == 0
    assert out.splitlines()[0] == "label,kind,macs,params"


def test_bad_config_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(capsys, "describe", "--config", str(bad))
    assert code == 2 and "malformed" in err


def test_bad_input_extent_exits_2(capsys):
    code, _, err = run(capsys, "flops", "--preset", "tiny",
                       "--input", "32x224")
    assert code == 2 and "extent" in err


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_deterministic_checksum(micro_json, capsys):
    code, out1, _ = run(capsys, "forward", "--config", micro_json,
                        "--seed", "5", "--format", "json")
    assert code == 0
    code, out2, _ = run(capsys, "forward", "--config", micro_json,
                        "--seed", "5", "--format", "json")
    assert code == 0
    assert json.loads(out1)["checksum"] == json.loads(out2)["checksum"]
    code, out3, _ = run(capsys, "forward", "--config", micro_json,
                        "--seed", "6", "--format", "json")
    assert json.loads(out3)["checksum"] != json.loads(out1)["checksum"]


def test_forward_single_class_and_dump(micro_json, tmp_path, capsys):
    dump = tmp_path / "logits.dftk"
    code, out, _ = run(capsys, "forward", "--config", micro_json,
                       "--classes", "1", "--dump", str(dump),
                       "--format", "json")
    assert code == 0
    stats = json.loads(out)
    assert stats["classes"] == 1
    logits = tensor_io.load_tensor(dump)
    assert logits.shape == (1,) and np.isfinite(logits[0])


# ---------------------------------------------------------------------------
# gradcheck / oracle-check
# ---------------------------------------------------------------------------

def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--coords", "8")
    assert code == 0
    assert "FAIL" not in out and "grad model end-to-end" in out


def test_gradcheck_injected_fault_fails(capsys):
    code, out, err = run(capsys, "gradcheck", "--coords", "4",
                         "--inject-fault")
    assert code == 1
    assert "FAIL" in out and "injected fault" in err


def test_oracle_check_passes(capsys):
    code, out, _ = run(capsys, "oracle-check", "--instances", "10")
    assert code == 0
    assert out.count("PASS") == 4


def test_oracle_check_injected_fault(capsys):
    code, _, _ = run(capsys, "oracle-check", "--instances", "2",
                     "--inject-fault")
    assert code == 1


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def test_bench_ratio_grows_with_m(capsys):
    code, out, _ = run(capsys, "bench", "--ladder", "2x4x4,4x8x8",
                       "--repeat", "2", "--format", "json")
    assert code == 0
    rows = json.loads(out)
    assert [r["M"] for r in rows] == [32, 256]
    assert rows[1]["measured_ratio"] > rows[0]["measured_ratio"]
    assert rows[1]["analytic_ratio"] > rows[0]["analytic_ratio"]
    # MAC columns match the analysis formulas
    from dftk.analysis import cost_full
    assert rows[0]["macs_full"] == cost_full(32, 32)


# ---------------------------------------------------------------------------
# inflate
# ---------------------------------------------------------------------------

def _write_2d_manifest(directory):
    directory.mkdir()
    rng = np.random.default_rng(0)
    entries = []
    tensors = {
        "patch_embed.weight": (rng.standard_normal((4, 4, 3, 8)), "conv2d"),
        "stage1.peg.weight": (rng.standard_normal((8, 3, 3)), "dwconv2d"),
        "head.weight": (rng.standard_normal((8, 5)), "matrix"),
    }
    for name, (arr, kind) in tensors.items():
        fname = f"{name}.dftk"
        tensor_io.save_tensor(directory / fname, arr)
        entries.append({"name": name, "kind": kind,
                        "shape": list(arr.shape), "file": fname})
    (directory / "manifest.json").write_text(json.dumps(
        {"format": "dftk-weights", "version": 1, "params": entries}))
    return tensors


def test_inflate_t1_payload_identical(tmp_path, capsys):
    src = tmp_path / "w2d"
    tensors = _write_2d_manifest(src)
    dst = tmp_path / "w3d"
    code, out, _ = run(capsys, "inflate", str(src), str(dst), "--t-extent", "1")
    assert code == 0
    for name, (arr, kind) in tensors.items():
        inflated = tensor_io.load_tensor(dst / f"{name}.dftk")
        assert np.array_equal(inflated.reshape(arr.shape), arr)
        # payload bytes unchanged (header rank differs for conv kinds)
        src_bytes = (src / f"{name}.dftk").read_bytes()
        dst_bytes = (dst / f"{name}.dftk").read_bytes()
        assert src_bytes[-arr.nbytes:] == dst_bytes[-arr.nbytes:]


def test_inflate_t2_shapes(tmp_path, capsys):
    src = tmp_path / "w2d"
    _write_2d_manifest(src)
    dst = tmp_path / "w3d"
    code, _, _ = run(capsys, "inflate", str(src), str(dst), "--t-extent", "2")
    assert code == 0
    manifest = json.loads((dst / "manifest.json").read_text())
    by_name = {e["name"]: e for e in manifest["params"]}
    assert by_name["patch_embed.weight"]["shape"] == [2, 4, 4, 3, 8]
    assert by_name["patch_embed.weight"]["kind"] == "conv3d"
    assert by_name["stage1.peg.weight"]["shape"] == [8, 2, 3, 3]
    assert by_name["stage1.peg.weight"]["kind"] == "dwconv3d"
    assert by_name["head.weight"]["shape"] == [8, 5]


def test_inflate_missing_manifest_exits_2(tmp_path, capsys):
    code, _, err = run(capsys, "inflate", str(tmp_path / "nope"),
                       str(tmp_path / "out"))
    assert code == 2 and "manifest" in err
