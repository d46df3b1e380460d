"""Tests for the federated representation protocols and the message bus."""

import numpy as np
import pytest

from vfkt.bus import ChannelEmpty, MessageBus
from vfkt.data import OverlapIndex
from vfkt.frl import (
    EigenShare,
    MaskPair,
    ProtocolError,
    fedsvd_keygen,
    fedsvd_mask,
    fedsvd_recover,
    fedsvd_server,
    run_fedsvd,
    run_frl,
    run_vfedpca,
    sample_gram,
    vfedpca_aggregate,
    vfedpca_local,
    vfedpca_reconstruct,
)


def _overlap(n):
    return OverlapIndex(
        overlapping_ids=tuple(f"s{i:03d}" for i in range(n)),
        task_rows=np.arange(n),
        data_rows=np.arange(n),
    )


def _parties(n=20, sizes=(4, 3, 5), seed=0):
    rng = np.random.default_rng(seed)
    return {f"p{k}": rng.normal(size=(n, f)) for k, f in enumerate(sizes)}


def _align_columns(u, ref):
    """Flip column signs of u to match ref (singular vectors are sign-ambiguous)."""
    signs = np.sign(np.sum(u * ref, axis=0))
    signs[signs == 0] = 1.0
    return u * signs


class TestBus:
    def test_fifo_per_channel(self):
        bus = MessageBus()
        bus.send("a", "b", "k", 1)
        bus.send("a", "b", "k", 2)
        assert bus.recv("a", "b").payload == 1
        assert bus.recv("a", "b").payload == 2

    def test_empty_channel(self):
        bus = MessageBus()
        with pytest.raises(ChannelEmpty):
            bus.recv("a", "b")

    def test_trace_fingerprint_only(self):
        bus = MessageBus()
        secret = np.arange(6.0).reshape(2, 3)
        bus.send("a", "b", "blob", secret)
        rec = bus.trace[0]
        assert set(rec) == {"from", "to", "kind", "shape", "checksum"}
        assert rec["shape"] == [2, 3]
        assert len(rec["checksum"]) == 16

    def test_trace_file_sink(self, tmp_path):
        import json

        path = tmp_path / "trace.jsonl"
        bus = MessageBus(trace_path=path)
        bus.send("a", "b", "k", np.ones(3))
        bus.send("b", "a", "k2", None)
        lines = path.read_text().strip().splitlines()
        assert [json.loads(ln)["kind"] for ln in lines] == ["k", "k2"]

    def test_trace_queries(self):
        bus = MessageBus()
        bus.send("a", "srv", "x", 1)
        bus.send("b", "srv", "y", 2)
        assert len(bus.messages_to("srv")) == 2
        assert [r["from"] for r in bus.messages_of_kind("y")] == ["b"]


class TestFedSvdSteps:
    def test_keygen_masks_are_orthogonal(self):
        pairs = fedsvd_keygen(8, [3, 5], seed=0)
        a = pairs[0].a
        np.testing.assert_allclose(a @ a.T, np.eye(8), atol=1e-10)
        assert all(np.array_equal(p.a, a) for p in pairs)
        b = np.vstack([p.b_k for p in pairs])
        np.testing.assert_allclose(b @ b.T, np.eye(8), atol=1e-10)
        assert [p.b_k.shape for p in pairs] == [(3, 8), (5, 8)]

    def test_keygen_rejects_bad_sizes(self):
        with pytest.raises(ProtocolError):
            fedsvd_keygen(0, [3], seed=0)
        with pytest.raises(ProtocolError):
            fedsvd_keygen(4, [], seed=0)
        with pytest.raises(ProtocolError):
            fedsvd_keygen(4, [2, 0], seed=0)

    def test_mask_dimension_mismatch(self):
        pairs = fedsvd_keygen(4, [3], seed=1)
        with pytest.raises(ProtocolError, match="mismatch"):
            fedsvd_mask(np.ones((4, 2)), pairs[0])

    def test_masking_preserves_singular_values(self):
        rng = np.random.default_rng(2)
        h = {f"p{k}": rng.normal(size=(10, f)) for k, f in enumerate((3, 4))}
        pairs = fedsvd_keygen(10, [3, 4], seed=3)
        masked = np.hstack([fedsvd_mask(h[f"p{k}"], pairs[k]) for k in range(2)])
        raw = np.hstack(list(h.values()))
        s_masked = np.linalg.svd(masked, compute_uv=False)
        s_raw = np.linalg.svd(raw, compute_uv=False)
        # masked width is the joint feature count per party, so trailing
        # singular values are exact zeros
        np.testing.assert_allclose(np.sort(s_masked)[::-1][: s_raw.size], s_raw, atol=1e-10)

    def test_server_rejects_inconsistent_rows(self):
        with pytest.raises(ProtocolError, match="row count"):
            fedsvd_server([np.ones((3, 2)), np.ones((4, 2))])
        with pytest.raises(ProtocolError, match="no masked parts"):
            fedsvd_server([])

    def test_recover_inverts_row_mask(self):
        pairs = fedsvd_keygen(5, [2], seed=4)
        u = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(fedsvd_recover(pairs[0].a @ u, pairs[0].a), u, atol=1e-12)

    def test_masked_upload_hides_raw_data(self):
        # [DERIVED] privacy smoke test: across seeds, the server-visible
        # block must not resemble the raw party block.
        failures = 0
        rng = np.random.default_rng(123)
        for seed in range(12):
            h = rng.normal(size=(15, 4))
            pair = fedsvd_keygen(15, [4], seed=seed)[0]
            masked = fedsvd_mask(h, pair)
            rel = np.linalg.norm(masked[:, :4] - h) / np.linalg.norm(h)
            if rel < 0.1:
                failures += 1
        assert failures <= 1


class TestFedSvdProtocol:
    def test_matches_centralized_svd(self):
        # [DERIVED] oracle: the recovered left factor must reproduce the
        # left singular vectors of the (never-assembled) joint matrix,
        # computed here with an independent library routine.
        parties = _parties(n=20, sizes=(4, 3, 5), seed=0)
        overlap = _overlap(20)
        bus = MessageBus()
        rep = run_fedsvd(bus, "p0", parties, overlap, seed=7)
        raw = np.hstack(list(parties.values()))
        u_ref = np.linalg.svd(raw, full_matrices=False)[0]
        assert rep.matrix.shape == (20, 12)
        np.testing.assert_allclose(
            _align_columns(rep.matrix, u_ref), u_ref, atol=1e-8)
        assert rep.method == "fedsvd"

    def test_rank_truncation(self):
        parties = _parties(n=12, sizes=(3, 3), seed=1)
        rep = run_fedsvd(MessageBus(), "p0", parties, _overlap(12), seed=2, rank=4)
        assert rep.matrix.shape == (12, 4)

    def test_server_never_sees_raw_blocks(self):
        parties = _parties(n=10, sizes=(3, 3), seed=5)
        bus = MessageBus()
        run_fedsvd(bus, "p0", parties, _overlap(10), seed=6)
        kinds_to_server = {r["kind"] for r in bus.messages_to("server")}
        assert kinds_to_server == {"masked_part"}
        # the factor goes to the task party only
        assert {r["to"] for r in bus.messages_of_kind("factor_u")} == {"p0"}

    def test_unknown_task_party(self):
        with pytest.raises(ProtocolError, match="task party"):
            run_fedsvd(MessageBus(), "ghost", _parties(), _overlap(20), seed=0)

    def test_row_count_mismatch(self):
        parties = _parties(n=20)
        with pytest.raises(ProtocolError, match="one row per"):
            run_fedsvd(MessageBus(), "p0", parties, _overlap(19), seed=0)


class TestVFedPcaSteps:
    def test_sample_gram_shape_and_scale(self):
        h = np.random.default_rng(0).normal(size=(6, 3))
        g = sample_gram(h)
        np.testing.assert_allclose(g, (h @ h.T) / 3.0, atol=1e-14)

    def test_local_share_is_unit_eigen_estimate(self):
        h = np.random.default_rng(1).normal(size=(8, 4))
        init = np.ones(8) / np.sqrt(8)
        share = vfedpca_local(h, iters=200, init=init)
        assert share.value >= 0
        np.testing.assert_allclose(np.linalg.norm(share.vector), 1.0, atol=1e-10)
        w, v = np.linalg.eigh(sample_gram(h))
        assert abs(abs(share.vector @ v[:, -1]) - 1.0) < 1e-8
        assert abs(share.value - w[-1]) < 1e-8

    def test_aggregate_exact_weights(self):
        v1 = np.array([1.0, 0.0])
        v2 = np.array([0.0, 1.0])
        u = vfedpca_aggregate([EigenShare(v1, 2.0), EigenShare(v2, 3.0)])
        np.testing.assert_allclose(u, [0.4, 0.6], atol=1e-15)

    def test_aggregate_sign_alignment(self):
        v = np.array([0.6, 0.8])
        u = vfedpca_aggregate([EigenShare(v, 1.0), EigenShare(-v, 1.0)])
        np.testing.assert_allclose(u, v, atol=1e-15)

    def test_aggregate_degenerate_inputs(self):
        with pytest.raises(ProtocolError, match="no eigenvector"):
            vfedpca_aggregate([])
        with pytest.raises(ProtocolError, match="zero"):
            vfedpca_aggregate([EigenShare(np.ones(2), 0.0)])

    def test_reconstruct_length_mismatch(self):
        with pytest.raises(ProtocolError, match="length"):
            vfedpca_reconstruct(np.ones((3, 2)), np.ones(4))

    def test_reconstruct_orthogonal_direction(self):
        h = np.array([[1.0], [0.0]])
        u = np.array([0.0, 1.0])
        with pytest.raises(ProtocolError, match="orthogonal"):
            vfedpca_reconstruct(h, u)

    def test_reconstruct_unit_projector(self):
        h = np.random.default_rng(2).normal(size=(5, 3))
        u = np.random.default_rng(3).normal(size=5)
        out = vfedpca_reconstruct(h, u)
        m = h.T @ u
        proj = np.outer(m, m)
        np.testing.assert_allclose(out, h @ (proj / np.linalg.norm(proj)), atol=1e-12)


class TestVFedPcaProtocol:
    def test_single_party_recovers_top_eigenvector(self):
        # [DERIVED] with one party, the aggregate direction must converge to
        # the top eigenvector of its own Gram matrix (independent oracle:
        # numpy's dense symmetric eigensolver).
        rng = np.random.default_rng(4)
        h = rng.normal(size=(25, 6))
        parties = {"p0": h}
        bus = MessageBus()
        rep = run_vfedpca(bus, "p0", parties, _overlap(25), seed=0, iter_num=300)
        w, v = np.linalg.eigh(sample_gram(h))
        agg = [r for r in bus.trace if r["kind"] == "aggregate_vector"]
        assert agg, "server must broadcast the aggregate direction"
        expected = vfedpca_reconstruct(h, v[:, -1])
        got = rep.matrix
        # reconstruction is sign-invariant in u, so compare directly
        np.testing.assert_allclose(got, expected, atol=1e-6)
        assert rep.method == "vfedpca"

    def test_warm_start_round_count(self):
        parties = _parties(n=10, sizes=(3, 3), seed=6)
        bus = MessageBus()
        run_vfedpca(bus, "p0", parties, _overlap(10), seed=1,
                    iter_num=25, period_num=10, warm_start=True)
        # 25 iterations at period 10 -> rounds of 10, 10, 5 -> 3 uploads/party
        shares = bus.messages_of_kind("eigen_share")
        assert len(shares) == 6

    def test_no_warm_start_single_round(self):
        parties = _parties(n=10, sizes=(3, 3), seed=6)
        bus = MessageBus()
        run_vfedpca(bus, "p0", parties, _overlap(10), seed=1,
                    iter_num=25, warm_start=False)
        assert len(bus.messages_of_kind("eigen_share")) == 2

    def test_deterministic_given_seed(self):
        parties = _parties(n=10, sizes=(3, 4), seed=8)
        r1 = run_vfedpca(MessageBus(), "p0", parties, _overlap(10), seed=5)
        r2 = run_vfedpca(MessageBus(), "p0", parties, _overlap(10), seed=5)
        np.testing.assert_array_equal(r1.matrix, r2.matrix)


class TestRunFrl:
    def test_begin_marker_first(self):
        parties = _parties(n=10, sizes=(3, 3), seed=9)
        bus = MessageBus()
        run_frl(bus, "fedsvd", "p0", parties, _overlap(10), seed=0)
        assert bus.trace[0]["kind"] == "frl_begin"
        assert bus.trace[0]["from"] == "p0"

    def test_dispatch_and_unknown_method(self):
        parties = _parties(n=10, sizes=(3, 3), seed=9)
        rep = run_frl(MessageBus(), "vfedpca", "p0", parties, _overlap(10), seed=0)
        assert rep.method == "vfedpca"
        with pytest.raises(ProtocolError, match="unknown FRL method"):
            run_frl(MessageBus(), "pca", "p0", parties, _overlap(10), seed=0)

    def test_representation_rejects_bad_rows(self):
        from vfkt.frl import FederatedRepresentation

        with pytest.raises(ProtocolError, match="rows"):
            FederatedRepresentation(matrix=np.ones((3, 2)), method="fedsvd",
                                    overlap=_overlap(4))
        with pytest.raises(ProtocolError, match="non-finite"):
            FederatedRepresentation(matrix=np.full((4, 2), np.nan),
                                    method="fedsvd", overlap=_overlap(4))
