"""Tests for the wire codecs and the coordinator/worker session."""

import queue
import socket
import struct
import threading

import numpy as np
import pytest

from fedtabgan import fednet, federation, gan
from fedtabgan.data import PatientMatrix, save_matrix
from fedtabgan.errors import IntegrityError, ProtocolError

CFG = gan.GanConfig(
    feature_dim=10, noise_dim=5, g_hidden=(8, 8), d_hidden=(8, 8),
    batch_size=6, seed=13,
)


def random_matrix(rows, cols, seed=0):
    rng = np.random.default_rng(seed)
    return PatientMatrix(rng.integers(0, 2, size=(rows, cols)).astype(np.uint8))


class TestMessageCodec:
    def test_hello_frame_layout(self):
        frame = fednet.encode_message(fednet.Message(fednet.HELLO, 0, 3))
        assert len(frame) == 13
        assert frame[:4] == b"\x00\x00\x00\x00"
        assert frame[4] == 1
        assert frame[5:9] == b"\x00\x00\x00\x00"
        assert frame[9:13] == b"\x00\x00\x00\x03"

    def test_assign_frame_layout(self):
        msg = fednet.Message(fednet.ASSIGN, 7, 2, b"xy")
        frame = fednet.encode_message(msg)
        assert frame == (b"\x00\x00\x00\x02" + b"\x02"
                         + b"\x00\x00\x00\x07" + b"\x00\x00\x00\x02" + b"xy")

    def test_round_trip_random_messages(self):
        rng = np.random.default_rng(0)
        payload_types = (fednet.ASSIGN, fednet.GLOBAL_WEIGHTS,
                         fednet.TRAINED_WEIGHTS, fednet.ERROR)
        for _ in range(200):
            type_code = int(rng.choice(payload_types))
            payload = rng.integers(0, 256, size=int(rng.integers(0, 64)),
                                   dtype=np.uint8).tobytes()
            msg = fednet.Message(type_code, int(rng.integers(0, 2**32)),
                                 int(rng.integers(0, 2**32)), payload)
            assert fednet.decode_message(fednet.encode_message(msg)) == msg
        for type_code in (fednet.HELLO, fednet.END):
            msg = fednet.Message(type_code, 5, 6)
            assert fednet.decode_message(fednet.encode_message(msg)) == msg

    def test_unknown_type_code_named(self):
        frame = b"\x00\x00\x00\x00" + bytes([9]) + b"\x00" * 8
        with pytest.raises(ProtocolError, match="9"):
            fednet.decode_message(frame)

    def test_truncations_rejected(self):
        frame = fednet.encode_message(
            fednet.Message(fednet.ERROR, 1, 2, b"boom"))
        for cut in (0, 3, 8, 12, len(frame) - 1):
            with pytest.raises(ProtocolError):
                fednet.decode_message(frame[:cut])

    def test_trailing_bytes_rejected(self):
        frame = fednet.encode_message(fednet.Message(fednet.END, 0, 0))
        with pytest.raises(ProtocolError, match="trailing"):
            fednet.decode_message(frame + b"\x00")

    def test_oversize_length_rejected_without_allocation(self):
        frame = struct.pack(">I", fednet.MAX_PAYLOAD + 1) + b"\x06" + b"\x00" * 8
        with pytest.raises(ProtocolError, match="256 MiB"):
            fednet.decode_message(frame)

    def test_hello_end_payload_must_be_empty(self):
        with pytest.raises(ProtocolError):
            fednet.encode_message(fednet.Message(fednet.HELLO, 0, 0, b"x"))
        frame = (struct.pack(">I", 1) + bytes([fednet.END])
                 + b"\x00" * 8 + b"x")
        with pytest.raises(ProtocolError):
            fednet.decode_message(frame)

    def test_fuzzed_frames_never_crash(self):
        rng = np.random.default_rng(1)
        base = fednet.encode_message(
            fednet.Message(fednet.TRAINED_WEIGHTS, 3, 1, b"payload-bytes"))
        for _ in range(2000):
            mode = rng.integers(0, 3)
            if mode == 0:
                data = rng.integers(0, 256, size=int(rng.integers(0, 40)),
                                    dtype=np.uint8).tobytes()
            elif mode == 1:
                data = bytearray(base)
                data[int(rng.integers(0, len(data)))] = int(rng.integers(0, 256))
                data = bytes(data)
            else:
                cut = int(rng.integers(0, len(base) + 4))
                data = base[:cut] + b"\xff" * int(rng.integers(0, 3))
            try:
                fednet.decode_message(data)
            except ProtocolError:
                pass


def expected_param_count(dims):
    total = 0
    for i in range(len(dims) - 1):
        total += dims[i] * dims[i + 1] + dims[i + 1]
    return total


class TestWeightsCodec:
    def test_round_trip_identity(self):
        model = gan.build_gan(CFG)
        gan.train(model, random_matrix(12, CFG.feature_dim), 2)
        data = fednet.encode_weights(model)
        bundle = fednet.decode_weights(data)
        assert bundle.to_bytes() == data
        again = fednet.decode_weights(bundle.to_bytes())
        assert again == bundle

    def test_apply_round_trip_is_f32_image(self):
        source = gan.build_gan(CFG)
        gan.train(source, random_matrix(12, CFG.feature_dim), 2)
        target = gan.build_gan(gan.GanConfig(
            feature_dim=10, noise_dim=5, g_hidden=(8, 8), d_hidden=(8, 8),
            batch_size=6, seed=99))
        fednet.apply_bundle(target, fednet.decode_weights(
            fednet.encode_weights(source)))
        want = federation.round_trip_f32(gan.weight_arrays(source))
        got = gan.weight_arrays(target)
        assert all(np.array_equal(a, b) for a, b in zip(got, want))

    def test_full_scale_config_value_count_and_size(self):
        g_count = expected_param_count((128, 128, 256, 512, 1071))
        d_count = expected_param_count((1071, 512, 256, 128, 1))
        model = gan.build_gan(gan.GanConfig(feature_dim=1071, seed=0))
        data = fednet.encode_weights(model)
        bundle = fednet.decode_weights(data)
        assert bundle.values.size == g_count + d_count == 1443760
        # 2-byte count, 16 shape entries, float block, 4-byte crc
        assert len(data) == 2 + 16 * 8 + 4 * bundle.values.size + 4
        assert len(data) / 1e6 == pytest.approx(5.78, abs=0.01)

    def test_every_flipped_byte_region_detected(self):
        model = gan.build_gan(CFG)
        data = bytearray(fednet.encode_weights(model))
        for pos in (0, 1, 5, 40, len(data) // 2, len(data) - 5, len(data) - 1):
            corrupt = bytearray(data)
            corrupt[pos] ^= 0x01
            with pytest.raises(IntegrityError):
                fednet.decode_weights(bytes(corrupt))

    def test_truncation_rejected(self):
        data = fednet.encode_weights(gan.build_gan(CFG))
        for cut in (0, 1, 5, len(data) // 2, len(data) - 1):
            with pytest.raises(IntegrityError):
                fednet.decode_weights(data[:cut])

    def test_extension_rejected(self):
        data = fednet.encode_weights(gan.build_gan(CFG))
        with pytest.raises(IntegrityError):
            fednet.decode_weights(data + b"\x00")

    def test_empty_shape_rejected(self):
        body = struct.pack(">H", 1) + struct.pack(">II", 0, 3)
        data = body + struct.pack(">I", __import__("zlib").crc32(body))
        with pytest.raises(IntegrityError):
            fednet.decode_weights(data)

    def test_value_count_mismatch_in_constructor(self):
        with pytest.raises(IntegrityError):
            fednet.WeightsBundle(((2, 2),), np.zeros(3, dtype=np.float32))

    def test_fuzzed_bundles_never_crash(self):
        rng = np.random.default_rng(2)
        base = fednet.encode_weights(gan.build_gan(CFG))
        for _ in range(500):
            mode = rng.integers(0, 2)
            if mode == 0:
                data = rng.integers(0, 256, size=int(rng.integers(0, 60)),
                                    dtype=np.uint8).tobytes()
            else:
                data = bytearray(base)
                data[int(rng.integers(0, len(data)))] = int(rng.integers(0, 256))
                data = bytes(data)
            try:
                fednet.decode_weights(data)
            except IntegrityError:
                pass


def start_coordinator(config, plan, timeout=30.0):
    addr_q: queue.Queue = queue.Queue()
    outcome = {}

    def serve():
        try:
            outcome["bundle"] = fednet.coordinator_run(
                config, plan, ("127.0.0.1", 0), timeout=timeout,
                on_listen=addr_q.put)
        except Exception as exc:  # surfaced by the test
            outcome["error"] = exc

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    host, port = addr_q.get(timeout=10)
    return thread, (host, port), outcome


def write_silos(tmp_path, data, plan):
    silos = federation.plan_silos(data, plan)
    paths = []
    for i, silo in enumerate(silos):
        path = tmp_path / f"silo{i}.csv"
        save_matrix(silo, path)
        paths.append(path)
    return paths


class TestSession:
    def test_two_worker_loopback_matches_in_process(self, tmp_path):
        data = random_matrix(24, CFG.feature_dim, seed=3)
        plan = federation.make_plan(24, 2, 8, rounds=1, shuffle_seed=CFG.seed)
        paths = write_silos(tmp_path, data, plan)
        thread, addr, outcome = start_coordinator(CFG, plan)
        codes = [None, None]

        def work(i):
            codes[i] = fednet.worker_run(paths[i], addr, i, CFG, timeout=30)

        workers = [threading.Thread(target=work, args=(i,)) for i in range(2)]
        for w in workers:
            w.start()
        for w in workers:
            w.join(timeout=60)
        thread.join(timeout=60)
        assert codes == [0, 0]
        assert "error" not in outcome
        in_process, _ = federation.run_federation(
            CFG, data, k=2, rounds=1, total_epochs=8)
        assert outcome["bundle"].to_bytes() == fednet.encode_weights(in_process)

    def test_two_rounds_loopback_matches_in_process(self, tmp_path):
        data = random_matrix(24, CFG.feature_dim, seed=4)
        plan = federation.make_plan(24, 2, 8, rounds=2, shuffle_seed=CFG.seed)
        paths = write_silos(tmp_path, data, plan)
        thread, addr, outcome = start_coordinator(CFG, plan)
        codes = [None, None]

        def work(i):
            codes[i] = fednet.worker_run(paths[i], addr, i, CFG, timeout=30)

        workers = [threading.Thread(target=work, args=(i,)) for i in range(2)]
        for w in workers:
            w.start()
        for w in workers:
            w.join(timeout=60)
        thread.join(timeout=60)
        assert codes == [0, 0]
        in_process, _ = federation.run_federation(
            CFG, data, k=2, rounds=2, total_epochs=8)
        assert outcome["bundle"].to_bytes() == fednet.encode_weights(in_process)

    def test_zero_budget_session_returns_initial_global(self, tmp_path):
        data = random_matrix(24, CFG.feature_dim, seed=5)
        plan = federation.FederationPlan(
            silo_count=2, silo_row_ranges=((0, 12), (12, 24)),
            epochs_per_node=(0, 0), rounds=1, shuffle_seed=CFG.seed)
        paths = write_silos(tmp_path, data, plan)
        thread, addr, outcome = start_coordinator(CFG, plan)
        codes = [None, None]

        def work(i):
            codes[i] = fednet.worker_run(paths[i], addr, i, CFG, timeout=30)

        workers = [threading.Thread(target=work, args=(i,)) for i in range(2)]
        for w in workers:
            w.start()
        for w in workers:
            w.join(timeout=60)
        thread.join(timeout=60)
        assert codes == [0, 0]
        assert outcome["bundle"].to_bytes() == fednet.encode_weights(
            gan.build_gan(CFG))

    def test_out_of_turn_worker_aborts_session(self, tmp_path):
        data = random_matrix(24, CFG.feature_dim, seed=6)
        plan = federation.make_plan(24, 2, 8, rounds=1, shuffle_seed=CFG.seed)
        paths = write_silos(tmp_path, data, plan)
        thread, addr, outcome = start_coordinator(CFG, plan, timeout=10.0)
        real_code = [None]

        def good():
            real_code[0] = fednet.worker_run(paths[0], addr, 0, CFG,
                                             timeout=10)

        stray = fednet.encode_weights(gan.build_gan(CFG))
        rogue = socket.create_connection(addr, timeout=10)
        rogue.settimeout(10)
        with rogue:
            # HELLO then an unsolicited reply, all before node 0 even joins,
            # so the stray frame is buffered before any turn starts
            fednet._send_message(rogue, fednet.Message(fednet.HELLO, 0, 1))
            fednet._send_message(
                rogue, fednet.Message(fednet.TRAINED_WEIGHTS, 0, 1, stray))
            good_thread = threading.Thread(target=good)
            good_thread.start()
            reply = fednet._recv_message(rogue)
            assert reply.type == fednet.ERROR
        good_thread.join(timeout=60)
        thread.join(timeout=60)
        assert isinstance(outcome.get("error"), ProtocolError)
        assert real_code[0] == 1

    def test_digest_mismatch_rejected_by_worker(self, tmp_path):
        data = random_matrix(24, CFG.feature_dim, seed=7)
        plan = federation.make_plan(24, 2, 8, rounds=1, shuffle_seed=CFG.seed)
        paths = write_silos(tmp_path, data, plan)
        thread, addr, outcome = start_coordinator(CFG, plan, timeout=10.0)
        other = gan.GanConfig(
            feature_dim=10, noise_dim=5, g_hidden=(8, 8), d_hidden=(8, 8),
            batch_size=6, seed=14)
        codes = [None, None]

        def work(i, cfg):
            codes[i] = fednet.worker_run(paths[i], addr, i, cfg, timeout=10)

        workers = [threading.Thread(target=work, args=(0, other)),
                   threading.Thread(target=work, args=(1, CFG))]
        for w in workers:
            w.start()
        for w in workers:
            w.join(timeout=60)
        thread.join(timeout=60)
        assert codes[0] == 1
        assert isinstance(outcome.get("error"), ProtocolError)

    def test_worker_gets_end_before_weights(self):
        listener = socket.socket()
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        addr = listener.getsockname()
        code = [None]

        def work():
            code[0] = fednet.worker_run("/nonexistent.csv", addr, 0, CFG)

        # a missing data file fails before any connection happens
        work()
        assert code[0] == 1

        tmp = __import__("tempfile").NamedTemporaryFile(
            mode="w", suffix=".csv", delete=False)
        save_matrix(random_matrix(6, CFG.feature_dim), tmp.name)
        result = [None]

        def work2():
            result[0] = fednet.worker_run(tmp.name, addr, 0, CFG, timeout=10)

        worker = threading.Thread(target=work2)
        worker.start()
        conn, _ = listener.accept()
        conn.settimeout(10)
        with conn:
            hello = fednet._recv_message(conn)
            assert hello.type == fednet.HELLO
            fednet._send_message(conn, fednet.Message(fednet.END, 0, 0))
        worker.join(timeout=30)
        listener.close()
        assert result[0] == 0

    def test_zero_budget_turn_echoes_payload(self, tmp_path):
        path = tmp_path / "data.csv"
        save_matrix(random_matrix(6, CFG.feature_dim), path)
        listener = socket.socket()
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        result = [None]

        def work():
            result[0] = fednet.worker_run(
                path, listener.getsockname(), 0, CFG, timeout=10)

        worker = threading.Thread(target=work)
        worker.start()
        conn, _ = listener.accept()
        conn.settimeout(10)
        with conn:
            assert fednet._recv_message(conn).type == fednet.HELLO
            payload = fednet.encode_weights(gan.build_gan(CFG))
            fednet._send_message(conn, fednet.Message(
                fednet.ASSIGN, 0, 0,
                fednet.assign_payload(0, CFG.digest())))
            fednet._send_message(conn, fednet.Message(
                fednet.GLOBAL_WEIGHTS, 0, 0, payload))
            reply = fednet._recv_message(conn)
            assert reply.type == fednet.TRAINED_WEIGHTS
            assert reply.payload == payload
            fednet._send_message(conn, fednet.Message(fednet.END, 0, 0))
        worker.join(timeout=30)
        listener.close()
        assert result[0] == 0

    def test_coordinator_times_out_without_workers(self):
        plan = federation.make_plan(24, 2, 8, rounds=1, shuffle_seed=0)
        with pytest.raises(ProtocolError):
            fednet.coordinator_run(CFG, plan, ("127.0.0.1", 0), timeout=0.2)

    def test_worker_connection_refused(self, tmp_path):
        path = tmp_path / "data.csv"
        save_matrix(random_matrix(6, CFG.feature_dim), path)
        # grab a port and close it so nothing listens there
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        addr = probe.getsockname()
        probe.close()
        assert fednet.worker_run(path, addr, 0, CFG, timeout=5) == 1


class TestPayloadPrivacy:
    def test_no_silo_rows_cross_the_wire(self, tmp_path, monkeypatch):
        data = random_matrix(24, 16, seed=8)
        cfg = gan.GanConfig(
            feature_dim=16, noise_dim=5, g_hidden=(8, 8), d_hidden=(8, 8),
            batch_size=6, seed=13)
        plan = federation.make_plan(24, 2, 4, rounds=1, shuffle_seed=cfg.seed)
        silos = federation.plan_silos(data, plan)
        paths = []
        for i, silo in enumerate(silos):
            path = tmp_path / f"silo{i}.csv"
            save_matrix(silo, path)
            paths.append(path)

        captured = []
        original = fednet._send_message

        def spy(sock, msg):
            captured.append(msg)
            original(sock, msg)

        monkeypatch.setattr(fednet, "_send_message", spy)
        thread, addr, outcome = start_coordinator(cfg, plan)
        codes = [None, None]

        def work(i):
            codes[i] = fednet.worker_run(paths[i], addr, i, cfg, timeout=30)

        workers = [threading.Thread(target=work, args=(i,)) for i in range(2)]
        for w in workers:
            w.start()
        for w in workers:
            w.join(timeout=60)
        thread.join(timeout=60)
        assert codes == [0, 0]
        assert "error" not in outcome

        allowed = {fednet.HELLO, fednet.ASSIGN, fednet.GLOBAL_WEIGHTS,
                   fednet.TRAINED_WEIGHTS, fednet.END}
        assert {msg.type for msg in captured} <= allowed
        payload_blob = b"\x00".join(msg.payload for msg in captured)
        for silo in silos:
            for row in silo.bits:
                assert row.tobytes() not in payload_blob
                assert row.astype("<f8").tobytes() not in payload_blob
                pm1 = row.astype(np.float64) * 2.0 - 1.0
                assert pm1.tobytes() not in payload_blob
                text = ",".join(str(int(v)) for v in row).encode()
                assert text not in payload_blob
