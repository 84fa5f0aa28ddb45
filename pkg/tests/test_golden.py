"""Byte-level reproducibility of every randomized command.

Set NATCOMP_REGEN_GOLDEN=1 to rewrite the files under tests/golden/.
"""
import contextlib
import io
import os
import threading
from pathlib import Path

import pytest

from natcomp import cli, ina

GOLDEN = Path(__file__).parent / "golden"
INPUT = GOLDEN / "input.txt"
CONF = GOLDEN / "run.conf"
REGEN = os.environ.get("NATCOMP_REGEN_GOLDEN") == "1"

CASES = {
    "compress_nat9": ["compress", str(INPUT), "--spec", "nat", "--seed", "7"],
    "compress_nat8c": ["compress", str(INPUT), "--spec", "nat", "--codec", "nat8c", "--seed", "7"],
    "compress_natdither": ["compress", str(INPUT), "--spec", "natdither:p=2,s=6", "--seed", "7"],
    "compress_stddither": ["compress", str(INPUT), "--spec", "stddither:p=inf,s=3", "--seed", "7"],
    "variance_summary": ["variance", "--spec", "nat", "--spec", "natdither:p=2,s=8",
                         "--spec", "compose(nat;sparsify:q=20)", "--d", "200", "--trials", "20",
                         "--seed", "7"],
    "variance_file": ["variance", "--spec", "stddither:p=2,s=2", "--input", str(INPUT),
                      "--trials", "10", "--per-trial", "--seed", "7"],
    "sgd_trace": ["sgd", str(CONF), "--seed", "7"],
    "sgd_seeds": ["sgd", str(GOLDEN / "seeds.conf"), "--seed", "7", "--format", "json-lines"],
}


def _capture(argv, tmp_path) -> bytes:
    out = io.StringIO()
    err = io.StringIO()
    argv = list(argv)
    block = tmp_path / "block.bin"
    if argv[0] == "compress":
        argv += ["--out", str(block)]
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main(argv)
    assert code == 0, err.getvalue()
    data = out.getvalue().encode() + err.getvalue().encode()
    if block.exists():
        data += block.read_bytes()
    return data


def _ina_round(tmp_path) -> bytes:
    srv = ina.serve(("127.0.0.1", 0), 3, 7, background=True)
    host, port = srv.address
    outs = [tmp_path / f"agg{i}.txt" for i in range(3)]
    codes = {}

    def worker(i):
        codes[i] = cli.main(["ina", "worker", str(INPUT), "--connect", f"{host}:{port}",
                             "--worker-id", str(i), "--workers", "3", "--session", "9",
                             "--chunk", "16", "--seed", "7", "--out", str(outs[i])])
    threads = [threading.Thread(target=worker, args=(i,)) for i in range(3)]
    with contextlib.redirect_stderr(io.StringIO()):
        try:
            for t in threads:
                t.start()
            for t in threads:
                t.join(20)
        finally:
            srv.shutdown()
            srv.server_close()
    assert codes == {0: 0, 1: 0, 2: 0}
    texts = [o.read_bytes() for o in outs]
    assert texts[0] == texts[1] == texts[2]
    return texts[0]


def _check(name, data):
    path = GOLDEN / f"{name}.golden"
    if REGEN:
        path.write_bytes(data)
    assert path.exists(), f"missing {path}; regenerate with NATCOMP_REGEN_GOLDEN=1"
    assert data == path.read_bytes()


@pytest.mark.parametrize("name", sorted(CASES))
def test_command_matches_golden(name, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    first = _capture(CASES[name], tmp_path)
    assert _capture(CASES[name], tmp_path) == first
    _check(name, first)


def test_ina_round_matches_golden(tmp_path):
    first = _ina_round(tmp_path)
    assert _ina_round(tmp_path) == first
    _check("ina_round", first)
