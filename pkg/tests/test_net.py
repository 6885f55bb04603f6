import numpy as np
import pytest
import torch
import torch.nn.functional as F

from genplan.net import (
    ArchConfig,
    BCModel,
    CheckpointError,
    Denoiser,
    DenoiserInput,
    MissingTape,
    NonFiniteGradient,
    ParamStore,
    backward,
    load_into,
    loss_grads,
    modulate,
    optimizer_step,
    read_checkpoint,
    save_checkpoint,
)
from genplan.gradcheck import check_full_loss, fd_check, primitive_cases, randn
from genplan.train import masked_nll, entropy_term

TINY = ArchConfig(width=4, height=4, channels=21, horizon=3, d_model=8, n_layers=2, n_heads=2, t_dim=4,
                  n_instructions=5)


def make_input(arch, B=2, seed=0, dtype=torch.float64, masked=0.5):
    g = torch.Generator().manual_seed(seed)
    H = arch.horizon

    def stream(v):
        x = torch.randint(0, v, (B, H), generator=g)
        m = torch.rand(B, H, generator=g) < masked
        return torch.where(m, torch.full_like(x, v), x)

    return DenoiserInput(
        stream(arch.n_states), stream(arch.n_actions), stream(arch.n_goals),
        torch.rand(B, arch.width, arch.height, arch.channels, generator=g, dtype=dtype),
        torch.randint(0, arch.n_states, (B,), generator=g),
        torch.randint(0, arch.n_instructions, (B,), generator=g),
        torch.rand(B, generator=g, dtype=dtype),
    )


def r(*shape, seed=0):
    return randn(*shape, seed=seed)


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(primitive_cases()))
    def test_primitive(self, name):
        fn, xs = primitive_cases()[name]
        assert fd_check(fn, xs) <= 1e-4


class TestModelGradients:
    @pytest.mark.parametrize("enc", ["cells", "conv", "flat"])
    def test_full_loss_finite_differences(self, enc):
        worst, checked = check_full_loss(ArchConfig(**{**TINY.to_dict(), "obs_encoder": enc}))
        assert checked > 50
        assert worst <= 1e-4

    def test_zero_upstream_gives_zero_grads(self):
        model = Denoiser(TINY).double()
        store = ParamStore(model)
        out = model(make_input(TINY))
        tensors = list(out.streams().values())
        grads = backward(store, tensors, [torch.zeros_like(t) for t in tensors])
        assert all(float(g.abs().max()) == 0.0 for g in grads.values())

    def test_missing_tape(self):
        model = Denoiser(TINY).double()
        store = ParamStore(model)
        with torch.no_grad():
            out = model(make_input(TINY))
        with pytest.raises(MissingTape):
            backward(store, out.actions, torch.ones_like(out.actions))

    def test_softmax_shift_direction(self):
        logits = r(2, 3, 6).requires_grad_(True)
        tgt = torch.tensor([[0, 1, 2], [3, 4, 5]])
        loss = F.cross_entropy(logits.transpose(1, 2), tgt) - 0.2 * entropy_term(logits)
        (g,) = torch.autograd.grad(loss, logits)
        assert float(g.sum(-1).abs().max()) <= 1e-6

    def test_uncorrupted_positions_get_zero_logit_gradient(self):
        logits = r(2, 3, 6).requires_grad_(True)
        ind = torch.tensor([[True, False, True], [False, False, True]])
        clean = torch.tensor([[0, 1, 2], [3, 4, 5]])
        from genplan.net import DenoiserOutput
        out = DenoiserOutput(r(2, 3, 4), logits, r(2, 3, 5))
        loss = masked_nll(out, {"states": clean % 4, "actions": clean, "goals": clean % 5},
                          {"states": ind, "actions": ind, "goals": ind})["actions"]
        (g,) = torch.autograd.grad(loss, logits)
        assert torch.all(g[~ind] == 0)
        assert torch.all(g[ind].abs().sum(-1) > 0)


class TestForward:
    def test_bidirectional(self):
        torch.manual_seed(0)
        model = Denoiser(TINY).double()
        a = make_input(TINY, masked=0.0)
        b = a.index(slice(None))
        b.actions = a.actions.clone()
        b.actions[:, 2] = (a.actions[:, 2] + 1) % TINY.n_actions
        oa, ob = model(a), model(b)
        for k in ("states", "actions", "goals"):
            assert not torch.allclose(getattr(oa, k)[:, :2], getattr(ob, k)[:, :2])

    def test_pure(self):
        model = Denoiser(TINY)
        inp = make_input(TINY, dtype=torch.float32)
        o1, o2 = model(inp), model(inp)
        assert all(torch.equal(x, y) for x, y in zip(o1.streams().values(), o2.streams().values()))

    def test_swapping_two_masks_is_identity(self):
        model = Denoiser(TINY).double()
        inp = make_input(TINY, masked=0.0)
        inp.actions[:, 0] = TINY.n_actions
        inp.actions[:, 2] = TINY.n_actions
        swapped = inp.index(slice(None))
        swapped.actions = inp.actions[:, [2, 1, 0]]
        assert torch.equal(model(inp).actions, model(swapped).actions)

    def test_mask_embedding_is_zero(self):
        model = Denoiser(TINY)
        assert float(model.embed["actions"].weight.detach()[TINY.n_actions].abs().sum()) == 0.0

    def test_softmax_rows_sum_to_one(self):
        model = Denoiser(TINY).double()
        out = model(make_input(TINY))
        for v in out.streams().values():
            assert torch.isfinite(v).all()
            assert float((v.detach().softmax(-1).sum(-1) - 1).abs().max()) <= 1e-7

    def test_shape_mismatch(self):
        model = Denoiser(TINY).double()
        inp = make_input(TINY)
        inp.actions = inp.actions[:, :2]
        with pytest.raises(ValueError):
            model(inp)

    def test_output_shapes(self):
        out = Denoiser(TINY).double()(make_input(TINY))
        assert out.states.shape == (2, 3, TINY.n_states)
        assert out.actions.shape == (2, 3, 6)
        assert out.goals.shape == (2, 3, TINY.n_goals)

    def test_context_tokens(self):
        arch = ArchConfig(**{**TINY.to_dict(), "ctx": 2})
        model = Denoiser(arch).double()
        inp = make_input(arch)
        inp.context = torch.tensor([[[1, 2], [3, 4]], [[5, 0], [6, 1]]])
        a = model(inp).actions
        inp.context = torch.tensor([[[1, 2], [3, 5]], [[5, 0], [6, 1]]])
        b = model(inp).actions
        assert not torch.allclose(a[0], b[0]) and torch.allclose(a[1], b[1])

    def test_bc_is_causal(self):
        torch.manual_seed(0)
        model = BCModel(TINY).double()
        inp = make_input(TINY, masked=0.0)
        s, a = inp.states, inp.actions
        la, _ = model(inp.grid, inp.agent, inp.instruction, s, a[:, :2])
        s2 = s.clone()
        s2[:, 2] = (s[:, 2] + 1) % TINY.n_states
        lb, _ = model(inp.grid, inp.agent, inp.instruction, s2, a[:, :2])
        assert torch.equal(la[:, :2], lb[:, :2]) and not torch.equal(la[:, 2], lb[:, 2])


class TestOptimizer:
    def _scalar(self, v=1.0):
        m = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            m.weight.fill_(v)
        return ParamStore(m)

    def test_zero_grads(self):
        st = self._scalar()
        before = st.params["weight"].clone()
        optimizer_step(st, st.zero_grads(), 0.1)
        assert torch.equal(st.params["weight"], before) and st.step == 1

    def test_constant_grad_direction(self):
        st = self._scalar(0.0)
        for _ in range(50):
            optimizer_step(st, {"weight": torch.full((1, 1), 2.0)}, 0.01)
        assert float(st.params["weight"].detach()) < 0

    def test_quadratic_bowl(self):
        m = torch.nn.Linear(4, 1, bias=False)
        with torch.no_grad():
            m.weight.copy_(torch.tensor([[0.5, -0.3, 0.8, 0.1]]))
        st = ParamStore(m)
        target = torch.tensor([[0.2, 0.1, -0.2, 0.3]])
        for _ in range(200):
            loss = ((st.params["weight"] - target) ** 2).sum()
            optimizer_step(st, loss_grads(st, loss), 1e-2)
        assert float(((st.params["weight"].detach() - target) ** 2).sum()) <= 1e-3

    def test_nan_rejected(self):
        st = self._scalar()
        before = st.params["weight"].clone()
        with pytest.raises(NonFiniteGradient):
            optimizer_step(st, {"weight": torch.full((1, 1), float("nan"))}, 0.1)
        assert torch.equal(st.params["weight"], before) and st.step == 0

    def test_missing_grad(self):
        st = self._scalar()
        with pytest.raises(KeyError):
            optimizer_step(st, {}, 0.1)


class TestCapacity:
    def test_overfit_single_pair(self):
        torch.manual_seed(0)
        arch = ArchConfig(**{**TINY.to_dict(), "d_model": 32, "n_heads": 4})
        model = Denoiser(arch)
        st = ParamStore(model)
        inp = make_input(arch, B=1, dtype=torch.float32, masked=0.7)
        g = torch.Generator().manual_seed(3)
        clean = {k: torch.randint(0, v, (1, arch.horizon), generator=g) for k, v in arch.vocab_sizes.items()}
        ind = {k: torch.ones(1, arch.horizon, dtype=torch.bool) for k in clean}
        for _ in range(500):
            nll = masked_nll(model(inp), clean, ind)
            optimizer_step(st, loss_grads(st, sum(nll.values())), 1e-2)
        nll = masked_nll(model(inp), clean, ind)
        assert max(float(v.detach()) for v in nll.values()) < 0.01

    def test_instruction_changes_goal_logits(self):
        from genplan.train import TrainConfig, TrajectorySet, fit
        arch = ArchConfig(**{**TINY.to_dict(), "d_model": 16, "n_heads": 2, "obs_encoder": "flat"})
        N, H = 64, arch.horizon
        instr = np.arange(N) % 4
        data = TrajectorySet(np.zeros((N, 4, 4, 21), np.float32), np.zeros(N, np.int64), instr,
                             np.zeros((N, H), np.int64), np.zeros((N, H), np.int64),
                             np.repeat(instr[:, None] * 3, H, 1).astype(np.int64))
        res = fit(data, TrainConfig(max_iters=150, batch_size=16, warmup=10, probe_every=0), arch)
        inp = DenoiserInput(torch.full((2, H), arch.n_states), torch.full((2, H), 6), torch.full((2, H), arch.n_goals),
                            torch.zeros(2, 4, 4, 21), torch.zeros(2, dtype=torch.long), torch.tensor([0, 2]),
                            torch.zeros(2))
        with torch.no_grad():
            out = res.model(inp)
        assert out.goals[0].argmax(-1).tolist() == [0] * H
        assert out.goals[1].argmax(-1).tolist() == [6] * H


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        torch.manual_seed(0)
        model = Denoiser(TINY)
        st = ParamStore(model)
        optimizer_step(st, loss_grads(st, model(make_input(TINY, dtype=torch.float32)).actions.sum()), 1e-3)
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, st, {"arch": TINY.to_dict(), "lambda": 0.25})
        header, arrays = read_checkpoint(p)
        assert header["step"] == 1 and header["lambda"] == 0.25
        torch.manual_seed(1)
        other = ParamStore(Denoiser(ArchConfig.from_dict(header["arch"])))
        load_into(other, arrays, header)
        for k in st.params:
            assert torch.equal(st.params[k], other.params[k])
            assert torch.equal(st.m[k], other.m[k]) and torch.equal(st.v[k], other.v[k])
        q = tmp_path / "b.ckpt"
        save_checkpoint(q, other, {"arch": TINY.to_dict(), "lambda": 0.25})
        assert p.read_bytes() == q.read_bytes()

    def test_layout(self, tmp_path):
        st = ParamStore(Denoiser(TINY))
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, st, {})
        raw = p.read_bytes()
        assert raw[:4] == b"GPCK"
        header, arrays = read_checkpoint(p)
        n = int.from_bytes(raw[8:12], "little")
        assert len(raw) == 12 + n + 8 * sum(a.size for a in arrays.values())

    def test_mismatch_and_truncation(self, tmp_path):
        st = ParamStore(Denoiser(TINY))
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, st, {})
        header, arrays = read_checkpoint(p)
        bigger = ParamStore(Denoiser(ArchConfig(**{**TINY.to_dict(), "d_model": 16})))
        with pytest.raises(CheckpointError):
            load_into(bigger, arrays, header)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            read_checkpoint(p)
