import json

import numpy as np
import pytest
import requests

from quadrbm.annealer import VirtualAnnealer, VirtualAnnealerConfig
from quadrbm.errors import (
    ProtocolError,
    StaleHandleError,
    TransportError,
    VersionMismatchError,
)
from quadrbm.ising import apply_scale, condition_to_flux, program_to_wire, rbm_to_ising
from quadrbm.rbm import batch_energy, random_rbm
from quadrbm.remote import AnnealerServer, RemoteAnnealer


@pytest.fixture
def loopback():
    config = VirtualAnnealerConfig(beta_qa=12.0, equilibration_steps=150)
    server = AnnealerServer(VirtualAnnealer(config, seed=2)).start()
    yield server
    server.stop()


@pytest.fixture
def client(loopback):
    return RemoteAnnealer(loopback.endpoint)


def small_program(seed=1):
    return apply_scale(rbm_to_ising(random_rbm((3, 3, 3, 3), sigma=0.5, seed=seed)), 12.0)


class TestLoopback:
    def test_remote_statistically_matches_local(self, client):
        rbm = random_rbm((3, 3, 3, 3), sigma=0.5, seed=1)
        program = apply_scale(rbm_to_ising(rbm), 12.0)
        local = VirtualAnnealer(VirtualAnnealerConfig(beta_qa=12.0, equilibration_steps=150), seed=9)
        n = 2048
        remote_batch = client.read(client.program(program), n, seed=4)
        local_batch = local.read(local.program(program), n, seed=5)
        e_remote = batch_energy(rbm, remote_batch)
        e_local = batch_energy(rbm, local_batch)
        se = np.sqrt(e_remote.var(ddof=1) / n + e_local.var(ddof=1) / n)
        assert abs(e_remote.mean() - e_local.mean()) < 3 * se

    def test_read_deterministic_given_seed(self, client):
        handle = client.program(small_program())
        a = client.read(handle, 16, seed=3)
        b = client.read(handle, 16, seed=3)
        np.testing.assert_array_equal(a.stacked(), b.stacked())

    def test_metadata_counts_reads(self, client):
        handle = client.program(small_program())
        client.read(handle, 5, seed=0)
        client.read(handle, 7, seed=1)
        assert handle.reads_served == 12
        assert handle.metadata["reads_served"] == 12

    def test_flux_biases_travel_over_the_wire(self, client):
        rbm = random_rbm((3, 3, 3, 3), sigma=0.5, seed=1)
        bits = np.array([1, 0, 1])
        program = apply_scale(rbm_to_ising(rbm), 12.0).replace(
            flux_biases=condition_to_flux(rbm.layout, "t", bits, strength=50.0 / 12.0)
        )
        batch = client.read(client.program(program), 200, seed=8)
        assert np.all(batch.t == bits, axis=1).mean() >= 0.999


class TestFailureModes:
    def test_unreachable_endpoint_is_transport_error(self):
        client = RemoteAnnealer("http://127.0.0.1:9", timeout=0.5)
        with pytest.raises(TransportError):
            client.program(small_program())

    def test_stale_handle_after_server_restart(self, loopback):
        client = RemoteAnnealer(loopback.endpoint)
        handle = client.program(small_program())
        loopback.stop()
        replacement = AnnealerServer(
            VirtualAnnealer(VirtualAnnealerConfig(beta_qa=12.0, equilibration_steps=50), seed=3)
        ).start()
        try:
            client2 = RemoteAnnealer(replacement.endpoint)
            with pytest.raises(StaleHandleError):
                client2.read(handle, 4, seed=0)
        finally:
            replacement.stop()

    def test_version_mismatch_rejected_by_server(self, loopback):
        payload = program_to_wire(small_program())
        payload["format_version"] = 99
        response = requests.post(f"{loopback.endpoint}/program", json=payload, timeout=5)
        assert response.status_code == 400
        assert response.json()["error"] == "version_mismatch"
        client = RemoteAnnealer(loopback.endpoint)
        with pytest.raises(VersionMismatchError):
            client._post("/program", payload)

    def test_malformed_state_length_is_protocol_error(self, client, monkeypatch):
        handle = client.program(small_program())

        def bad_post(path, payload):
            return {
                "format_version": 1,
                "states": [[1, -1]],
                "effective_metadata": {},
            }

        monkeypatch.setattr(client, "_post", bad_post)
        with pytest.raises(ProtocolError):
            client.read(handle, 1, seed=0)
        # no partial batch left behind
        assert handle.reads_served == 0

    def test_malformed_body_is_protocol_error(self, loopback):
        response = requests.post(
            f"{loopback.endpoint}/read",
            data=b"this is not json",
            headers={"Content-Type": "application/json"},
            timeout=5,
        )
        assert response.status_code == 400
        assert response.json()["error"] == "protocol"

    def test_unknown_endpoint(self, loopback):
        response = requests.post(f"{loopback.endpoint}/anneal", json={}, timeout=5)
        assert response.status_code == 404


class TestBackendContract:
    """Any sampler test written against program/read passes on both backends."""

    @pytest.fixture(params=["virtual", "remote"])
    def backend_and_handle(self, request, loopback):
        program = small_program(seed=6)
        if request.param == "virtual":
            backend = VirtualAnnealer(
                VirtualAnnealerConfig(beta_qa=12.0, equilibration_steps=150), seed=2
            )
        else:
            backend = RemoteAnnealer(loopback.endpoint)
        return backend, backend.program(program)

    def test_read_shapes_and_alphabet(self, backend_and_handle):
        backend, handle = backend_and_handle
        batch = backend.read(handle, 9, seed=1)
        assert len(batch) == 9
        stacked = batch.stacked()
        assert stacked.shape == (9, 12)
        assert set(np.unique(stacked)) <= {0, 1}
        assert batch.source == "annealer"

    def test_reads_are_seed_reproducible(self, backend_and_handle):
        backend, handle = backend_and_handle
        a = backend.read(handle, 6, seed=11)
        b = backend.read(handle, 6, seed=11)
        np.testing.assert_array_equal(a.stacked(), b.stacked())
