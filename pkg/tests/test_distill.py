import numpy as np
import pytest
from pydantic import ValidationError

from medistill.autodiff import Tensor, functional as F, parameter
from medistill.autodiff.gradcheck import check_gradients
from medistill.config import toy_config
from medistill.distill import (DistillPlan, ProjectionSet, at_loss, attention_kl, combined_loss, hr_channel_loss,
                               hr_loss)
from medistill.errors import ConfigurationError, ContractError
from medistill.model import MEDModel, forward_collect
from medistill.objectives import make_negative_sampler
from medistill.optim import AdamW, OptimConfig


def traces(teacher, student, batch):
    t = forward_collect(teacher, batch, make_negative_sampler(0.07, np.random.default_rng(0)))
    s = forward_collect(student, batch, make_negative_sampler(0.07, np.random.default_rng(0)))
    return t, s


def test_self_distillation_is_a_fixed_point(small_config, small_batch):
    teacher = MEDModel.initialize(small_config, seed=0)
    student = teacher.clone()
    plan = DistillPlan(projection_init="identity")
    proj = ProjectionSet.build(plan, small_config, small_config, np.random.default_rng(0))
    t, s = traces(teacher, student, small_batch)
    assert abs(hr_loss(t, s, plan, proj).item()) < 1e-12
    assert abs(at_loss(t, s, plan).item()) < 1e-12


def test_antipodal_states_give_maximal_cosine_loss():
    a = np.random.default_rng(0).normal(size=(2, 3, 4))
    eye = Tensor(np.eye(4))
    loss = hr_channel_loss(Tensor(a), Tensor(-a), eye, eye, np.ones((2, 3), bool))
    assert loss.item() == pytest.approx(2.0, abs=1e-12)


def test_hr_ignores_padded_tokens():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))
    eye = Tensor(np.eye(4))
    mask = np.array([[True, True, False]])
    full = hr_channel_loss(Tensor(a[:, :2]), Tensor(b[:, :2]), eye, eye, np.ones((1, 2), bool))
    b[0, 2] = 100.0
    assert hr_channel_loss(Tensor(a), Tensor(b), eye, eye, mask).item() == pytest.approx(full.item(), rel=1e-12)


def test_attention_kl_closed_form():
    p = Tensor(np.array([0.5, 0.5]).reshape(1, 1, 1, 2))
    q = Tensor(np.array([0.9, 0.1]).reshape(1, 1, 1, 2))
    expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
    assert attention_kl(p, q).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5108, abs=1e-4)
    assert attention_kl(p, p).item() == pytest.approx(0.0, abs=1e-15)


def test_attention_kl_is_non_negative_over_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = rng.integers(2, 9)
        alpha = rng.uniform(0.05, 3.0)
        p = rng.dirichlet(np.full(k, alpha), size=(1, 2, 3))
        q = rng.dirichlet(np.full(k, alpha), size=(1, 2, 3))
        assert attention_kl(Tensor(p), Tensor(q)).item() >= -1e-12


def test_attention_kl_survives_student_underflow():
    p = Tensor(np.array([0.5, 0.5]).reshape(1, 1, 1, 2))
    q = Tensor(np.array([1.0, 0.0]).reshape(1, 1, 1, 2))
    value = attention_kl(p, q).item()
    assert np.isfinite(value)
    assert value == pytest.approx(0.5 * np.log(0.5) + 0.5 * np.log(0.5 / 1e-12), rel=1e-12)


def test_attention_kl_head_averages_on_mismatch():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(4), size=(2, 4, 3))
    q = rng.dirichlet(np.ones(4), size=(2, 2, 3))
    pm, qm = p.mean(axis=1, keepdims=True), q.mean(axis=1, keepdims=True)
    expected = (pm * np.log(pm / qm)).sum(-1).mean()
    assert attention_kl(Tensor(p), Tensor(q)).item() == pytest.approx(expected, rel=1e-12)


def test_attention_kl_rejects_length_mismatch_naming_component():
    with pytest.raises(ContractError, match="decoder self-attention"):
        attention_kl(Tensor(np.full((1, 1, 3, 3), 1 / 3)), Tensor(np.full((1, 1, 4, 4), 0.25)),
                     component="decoder self-attention")


def test_attention_kl_gradient():
    rng = np.random.default_rng(2)
    p = Tensor(rng.dirichlet(np.ones(4), size=(1, 2, 3)))
    logits = parameter(rng.normal(size=(1, 2, 3, 4)))
    mask = np.array([[True, True, False]])
    assert check_gradients(lambda: attention_kl(p, F.softmax(logits), mask), [logits]) < 1e-6


def test_hr_is_the_mean_of_channel_losses(small_config, small_batch):
    teacher = MEDModel.initialize(small_config, seed=0)
    student = MEDModel.initialize(small_config, seed=1)
    plan = DistillPlan()
    proj = ProjectionSet.build(plan, small_config, small_config, np.random.default_rng(0))
    t, s = traces(teacher, student, small_batch)
    parts = [hr_loss(t, s, plan, proj, channels=[ch]).item() for ch in plan.channels]
    assert hr_loss(t, s, plan, proj).item() == pytest.approx(np.mean(parts), rel=1e-12)


def test_teacher_receives_no_gradient(small_config, small_batch):
    teacher = MEDModel.initialize(small_config, seed=0)
    student = MEDModel.initialize(small_config, seed=1)
    plan = DistillPlan()
    proj = ProjectionSet.build(plan, small_config, small_config, np.random.default_rng(0))
    t, s = traces(teacher, student, small_batch)
    F.add(hr_loss(t, s, plan, proj), at_loss(t, s, plan)).backward()
    assert all(p.grad is None for p in teacher.parameters())
    # the teacher-side projections are trainable even though teacher states are frozen
    assert all(p.grad is not None for name, p in proj.named_parameters() if name.endswith(".teacher"))
    assert any(p.grad is not None and p.grad.any() for p in student.parameters())


def test_disabled_attention_term_is_absent_from_graph():
    logits = parameter(np.array([[0.2, -0.4]]))
    at = attention_kl(Tensor(np.array([0.5, 0.5]).reshape(1, 1, 1, 2)), F.reshape(F.softmax(logits), (1, 1, 1, 2)))
    vlp = F.sum(F.mul(parameter(np.array([1.0])), 2.0))
    plan = DistillPlan(use_at=False)
    combined_loss(vlp, at, Tensor(np.array(0.1)), plan).backward()
    assert logits.grad is None


def test_combined_loss_arithmetic():
    vlp, at, hr = (Tensor(np.array(v)) for v in (1.0, 0.2, 0.3))
    assert combined_loss(vlp, at, hr, DistillPlan()).item() == pytest.approx(1.5)
    plan = DistillPlan(alpha=2.0, lambda_at=0.5, lambda_hr=3.0)
    assert combined_loss(vlp, at, hr, plan).item() == pytest.approx(1.0 + 2.0 * (0.5 * 0.2 + 3.0 * 0.3))
    assert combined_loss(vlp, at, hr, DistillPlan(alpha=0.0)) is vlp


def test_combined_gradient_decomposes_linearly():
    rng = np.random.default_rng(0)
    x = parameter(rng.normal(size=3))
    terms = {"vlp": lambda: F.sum(F.mul(x, x)), "at": lambda: F.sum(F.exp(x)), "hr": lambda: F.sum(F.mul(x, 3.0))}
    grads = {}
    for k, fn in terms.items():
        x.grad = None
        fn().backward()
        grads[k] = x.grad.copy()
    plan = DistillPlan(alpha=0.7, lambda_at=1.5, lambda_hr=0.25)
    x.grad = None
    combined_loss(terms["vlp"](), terms["at"](), terms["hr"](), plan).backward()
    expected = grads["vlp"] + 0.7 * (1.5 * grads["at"] + 0.25 * grads["hr"])
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)


def test_hr_decreases_when_optimizing_projections():
    rng = np.random.default_rng(0)
    teacher_state = Tensor(rng.normal(size=(4, 5, 6)))
    student_state = Tensor(rng.normal(size=(4, 5, 3)))
    w_t = parameter(rng.normal(size=(6, 6)) * 0.3)
    w_s = parameter(rng.normal(size=(3, 6)) * 0.3)
    mask = np.ones((4, 5), bool)
    opt = AdamW([("proj.teacher", w_t), ("proj.student", w_s)], OptimConfig(lr=1e-2))
    history = []
    for _ in range(200):
        opt.zero_grad()
        loss = hr_channel_loss(teacher_state, student_state, w_t, w_s, mask)
        loss.backward()
        opt.step(1e-2)
        history.append(loss.item())
    assert history[-1] < 0.5 * history[0]


def test_plan_validation():
    with pytest.raises(ValidationError):
        DistillPlan(channels=["img", "img"])
    with pytest.raises(ValidationError):
        DistillPlan(channels=[])
    with pytest.raises(ValidationError):
        DistillPlan(bogus=1)
    assert DistillPlan(channels=[], alpha=0.0).enabled is False


def test_geometry_contracts():
    teacher = toy_config(dim=16, heads=2, layers=2)
    plan = DistillPlan()
    with pytest.raises(ContractError, match="vocab_size"):
        plan.check_models(teacher, toy_config(dim=8, heads=2, layers=1, vocab_size=30))
    with pytest.raises(ContractError, match="patch"):
        plan.check_models(teacher, toy_config(dim=8, heads=2, layers=1, patch_size=8))
    with pytest.raises(ConfigurationError):
        plan.check_models(teacher, toy_config(dim=8, heads=2, layers=1, decoder_layers=0))
    plan.check_models(teacher, toy_config(dim=8, heads=2, layers=1))


def test_heterogeneous_widths_and_heads(small_batch):
    tcfg = toy_config(dim=16, heads=4, layers=2, image_size=16, max_len=12)
    scfg = toy_config(dim=8, heads=2, layers=1, image_size=16, max_len=12)
    plan = DistillPlan()
    proj = ProjectionSet.build(plan, tcfg, scfg, np.random.default_rng(0))
    assert proj.pair("img")[0].shape == (16, 16) and proj.pair("img")[1].shape == (8, 16)
    t, s = traces(MEDModel.initialize(tcfg, 0), MEDModel.initialize(scfg, 1), small_batch)
    assert hr_loss(t, s, plan, proj).item() > 0 and at_loss(t, s, plan).item() > 0


def test_missing_channel_is_a_configuration_error(small_config, small_batch):
    m = MEDModel.initialize(small_config, 0)
    plan = DistillPlan(channels=["vl_d"])
    proj = ProjectionSet.build(plan, small_config, small_config, np.random.default_rng(0))
    t = forward_collect(m, small_batch, with_decoder=False)
    with pytest.raises(ConfigurationError):
        hr_loss(t, t, plan, proj)
