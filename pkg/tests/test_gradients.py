"""Hand-written reverse-mode gradients vs central finite differences."""
import numpy as np

from mode_ood.alpa import ProjectionHeads, alpa_loss_and_grads, supcon_loss_and_grads
from mode_ood.features import _philox
from mode_ood.trainer import EncoderParams, base_projection_head, combined_loss_and_grads

FD_H = 1e-6
# per-coordinate tolerance: max(1e-6 abs, 1e-4 rel)
ABS_TOL = 1e-6
REL_TOL = 1e-4


def assert_grad_close(analytic, numeric, what):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    tol = np.maximum(ABS_TOL, REL_TOL * np.abs(numeric))
    err = np.abs(analytic - numeric)
    worst = int(np.argmax(err - tol))
    assert (err <= tol).all(), (
        f"{what}: coord {worst} analytic {analytic[worst]} vs fd {numeric[worst]} "
        f"(err {err[worst]:.3e}, tol {tol[worst]:.3e})")


def fd_grad(fn, arr):
    """Central finite differences of scalar fn over every entry of arr."""
    flat = arr.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + FD_H
        up = fn()
        flat[i] = orig - FD_H
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * FD_H)
    return out.reshape(arr.shape)


def small_instance(seed, two_n=4, hw=4, e_in=3, e_out=2):
    rng = _philox(seed)
    feats = rng.standard_normal((two_n, hw, e_in))
    labels = np.repeat(np.arange(two_n // 2), 2)
    heads = ProjectionHeads(
        rng.standard_normal((e_in, e_out)),
        rng.standard_normal((e_in, e_out)),
        rng.standard_normal((e_in, e_out)),
        rng.standard_normal(e_out),
        rng.standard_normal(e_out),
        rng.standard_normal(e_out),
    )
    return feats, labels, heads


class TestAlpaGradients:
    def test_head_and_input_grads_match_fd(self):
        for seed in range(20):
            feats, labels, heads = small_instance(seed)
            tau = 0.8
            _, head_grads, d_feats = alpa_loss_and_grads(feats, labels, heads, tau)

            def loss():
                return alpa_loss_and_grads(feats, labels, heads, tau)[0]

            for name in ("w_k", "w_q", "w_v", "b_k", "b_q", "b_v"):
                num = fd_grad(loss, getattr(heads, name))
                assert_grad_close(head_grads[name], num, f"seed {seed} {name}")
            assert_grad_close(d_feats, fd_grad(loss, feats), f"seed {seed} d_feats")

    def test_low_temperature_stays_accurate(self):
        feats, labels, heads = small_instance(99)
        tau = 0.1
        _, head_grads, d_feats = alpa_loss_and_grads(feats, labels, heads, tau)

        def loss():
            return alpa_loss_and_grads(feats, labels, heads, tau)[0]

        assert_grad_close(head_grads["w_v"], fd_grad(loss, heads.w_v), "w_v tau=0.1")
        assert_grad_close(d_feats, fd_grad(loss, feats), "d_feats tau=0.1")


class TestSupconGradients:
    def test_input_grads_match_fd(self):
        for seed in range(20):
            rng = _philox(1000 + seed)
            feats = rng.standard_normal((4, 4, 3))
            labels = np.array([0, 0, 1, 1])
            head = rng.standard_normal((3, 2))
            tau = 0.6
            _, d_feats = supcon_loss_and_grads(feats, labels, head, tau)

            def loss():
                return supcon_loss_and_grads(feats, labels, head, tau)[0]

            assert_grad_close(d_feats, fd_grad(loss, feats), f"seed {seed} d_feats")


class TestCombinedGradients:
    """Both objectives through the encoder chain."""

    def params_of(self, encoder, heads):
        return {
            "w_enc": encoder.w, "b_enc": encoder.b,
            "w_k": heads.w_k, "b_k": heads.b_k,
            "w_q": heads.w_q, "b_q": heads.b_q,
            "w_v": heads.w_v, "b_v": heads.b_v,
        }

    def check_mode(self, seed, mode):
        rng = _philox(seed)
        feats_raw = rng.standard_normal((4, 4, 3))
        labels = np.array([0, 0, 1, 1])
        encoder = EncoderParams(np.eye(3) + 0.1 * rng.standard_normal((3, 3)),
                                0.1 * rng.standard_normal(3))
        heads = ProjectionHeads(*(rng.standard_normal((3, 2)) for _ in range(3)),
                                *(rng.standard_normal(2) for _ in range(3)))
        base_head = base_projection_head(3, 2, seed)
        tau = 0.7
        _, grads = combined_loss_and_grads(feats_raw, labels, encoder, heads,
                                           tau, mode, lam=0.5, base_head=base_head)

        def loss():
            return combined_loss_and_grads(feats_raw, labels, encoder, heads,
                                           tau, mode, lam=0.5, base_head=base_head)[0]

        for name, param in self.params_of(encoder, heads).items():
            num = fd_grad(loss, param)
            assert_grad_close(grads[name], num, f"seed {seed} {mode} {name}")

    def test_finetune_mode(self):
        for seed in range(10):
            self.check_mode(seed, "finetune")

    def test_train_mode(self):
        for seed in range(10):
            self.check_mode(seed, "train")
