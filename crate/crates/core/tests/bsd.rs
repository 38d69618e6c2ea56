use blendeform::bsd::*;
use blendeform::concepts::primitive_bank;
use blendeform::guidance::{BankConfig, ExemplarBank, Mat, NoiseSchedule, PromptToken};
use blendeform::image::Image;
use blendeform::mesh::shapes::Primitive;
use blendeform::mesh::{poisson_solve, GradientOperator, JacobianField, Mesh};
use blendeform::render::{CameraRig, RenderSettings, ViewRender};
use blendeform::Error;
use nalgebra::{Matrix3, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Image {
    Image::from_vec(n, n, (0..n * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn small_bank() -> ExemplarBank {
    primitive_bank(
        &[Primitive::Box, Primitive::Cone],
        8,
        0,
        &CameraRig::default(),
        &RenderSettings::default(),
        BankConfig::default(),
    )
    .unwrap()
}

fn short_spec(targets: Vec<BlendTarget>, iterations: usize) -> BlendSpec {
    BlendSpec {
        iterations,
        ..BlendSpec::desk(targets)
    }
}

fn boxed(w: f64) -> BlendTarget {
    BlendTarget::new(PromptToken::class("box"), w)
}

#[test]
fn diffusion_loss_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = random_image(&mut rng, 8);
    assert_eq!(diffusion_loss(&e, &e, 1.0).unwrap(), 0.0);

    let mut unit = Image::new(8, 8);
    unit.set(3, 5, 0.6);
    unit.set(1, 1, -0.8);
    let shifted = Image::from_vec(8, 8, e.data().iter().zip(unit.data()).map(|(a, b)| a + b).collect()).unwrap();
    assert!((diffusion_loss(&shifted, &e, 1.0).unwrap() - 1.0).abs() < 1e-12);

    let h = random_image(&mut rng, 8);
    let mut brute = 0.0;
    for y in 0..8 {
        for x in 0..8 {
            let d = h.get(x, y) - e.get(x, y);
            brute += d * d;
        }
    }
    assert!((diffusion_loss(&h, &e, 0.37).unwrap() - 0.37 * brute).abs() < 1e-12);
    assert!(diffusion_loss(&h, &Image::new(4, 4), 1.0).is_err());
}

#[test]
fn guidance_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (text, null, eps) = (random_image(&mut rng, 6), random_image(&mut rng, 6), random_image(&mut rng, 6));

    assert_eq!(cfg_combine(&text, &null, 0.0).unwrap(), text);
    assert_eq!(cfg_combine(&text, &text, 100.0).unwrap(), text);
    let g = cfg_combine(&text, &null, 100.0).unwrap();
    for i in 0..36 {
        let direct = text.data()[i] + 100.0 * (text.data()[i] - null.data()[i]);
        assert!((g.data()[i] - direct).abs() < 1e-12);
    }

    assert_eq!(modified_cfg(&eps, &text, &text, 100.0).unwrap(), eps);
    assert_eq!(modified_cfg(&eps, &text, &null, 0.0).unwrap(), eps);
    let m = modified_cfg(&eps, &text, &null, 100.0).unwrap();
    for i in 0..36 {
        let diff = g.data()[i] - m.data()[i];
        assert!((diff - (text.data()[i] - eps.data()[i])).abs() < 1e-9);
    }
}

#[test]
fn blend_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mat = || Mat::from_vec(5, 4, (0..20).map(|_| rng.sample(StandardNormal)).collect());
    let (own, a, b) = (mat(), mat(), mat());

    assert_eq!(blend_activations(&own, &[(a.clone(), 1.0)]).unwrap(), a);
    assert_eq!(blend_activations(&own, &[(a.clone(), 0.0), (b.clone(), 0.0)]).unwrap(), own);
    let mixed = blend_activations(&own, &[(a.clone(), 0.3), (b.clone(), 0.4)]).unwrap();
    for i in 0..5 {
        for j in 0..4 {
            let expect = 0.3 * a.get(i, j) + 0.4 * b.get(i, j) + 0.3 * own.get(i, j);
            assert!((mixed.get(i, j) - expect).abs() < 1e-12);
        }
    }
    assert!(blend_activations(&own, &[(Mat::zeros(5, 3), 0.5)]).is_err());
    assert!(blend_activations(&own, &[(a.clone(), 0.7), (b, 0.4)]).is_err());
    assert!(blend_activations(&own, &[(a, -0.1)]).is_err());
}

#[test]
fn regularizer_cases() {
    let (loss, grad) = jacobian_regularizer_gradient(&JacobianField::identity(10), 2.5);
    assert_eq!(loss, 0.0);
    assert_eq!(grad, JacobianField::zeros(10));

    let mut field = JacobianField::identity(4);
    field.per_face[2] = Matrix3::identity() * 2.0;
    let (loss, grad) = jacobian_regularizer_gradient(&field, 1.7);
    assert!((loss - 1.7 * 3f64.sqrt()).abs() < 1e-12);
    assert!((grad.per_face[2] - Matrix3::identity() * (1.7 / 3f64.sqrt())).norm() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let field = JacobianField {
        per_face: (0..30)
            .map(|_| Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    };
    let (loss, grad) = jacobian_regularizer_gradient(&field, 0.8);
    let mut brute = 0.0;
    for j in &field.per_face {
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let d = j[(r, c)] - if r == c { 1.0 } else { 0.0 };
                s += d * d;
            }
        }
        brute += s.sqrt();
    }
    assert!((loss - 0.8 * brute).abs() < 1e-12);

    // central differences of the loss
    let h = 1e-6;
    for (f, r, c) in [(0, 0, 0), (7, 1, 2), (29, 2, 1)] {
        let mut up = field.clone();
        up.per_face[f][(r, c)] += h;
        let mut down = field.clone();
        down.per_face[f][(r, c)] -= h;
        let fd = (jacobian_regularizer_gradient(&up, 0.8).0 - jacobian_regularizer_gradient(&down, 0.8).0) / (2.0 * h);
        assert!((fd - grad.per_face[f][(r, c)]).abs() < 1e-6);
    }
}

fn triangle() -> Mesh {
    Mesh::new(
        vec![Point3::new(-0.9, -0.7, 0.0), Point3::new(0.9, -0.6, 0.1), Point3::new(0.1, 0.9, -0.1)],
        vec![[0, 1, 2]],
        None,
    )
    .unwrap()
}

#[test]
fn sds_gradient_matches_finite_differences_on_a_triangle() {
    let mesh = triangle();
    let op = GradientOperator::new(&mesh).unwrap();
    let anchor = op.source_anchor();
    let settings = RenderSettings::default();
    let camera = CameraRig::default()
        .camera_at(mesh.centroid(), 1.3, 0.25)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let residual = random_image(&mut rng, settings.output);
    let draw = SdsDraw {
        eps_hat: residual.clone(),
        eps: Image::new(settings.output, settings.output),
        weight: 0.7,
        alpha_bar: 0.6,
    };
    let field = JacobianField {
        per_face: vec![Matrix3::new(1.1, 0.05, 0.0, -0.1, 0.95, 0.02, 0.03, 0.0, 1.0)],
    };
    let verts = poisson_solve(&op, &field, anchor).unwrap();
    let view = ViewRender::new(&mesh, &verts, &camera, &settings).unwrap();
    let grad = sds_gradient(std::slice::from_ref(&draw), std::slice::from_ref(&view), &op).unwrap();

    // Surrogate w·⟨r, z_t(J)⟩; the noise term of z_t does not depend on J.
    let surrogate = |f: &JacobianField| {
        let v = poisson_solve(&op, f, anchor).unwrap();
        let img = ViewRender::new(&mesh, &v, &camera, &settings).unwrap().image;
        0.7 * 0.6f64.sqrt() * img.data().iter().zip(residual.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let dir = Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let h = 1e-6;
    let plus = JacobianField { per_face: vec![field.per_face[0] + dir * h] };
    let minus = JacobianField { per_face: vec![field.per_face[0] - dir * h] };
    let fd = (surrogate(&plus) - surrogate(&minus)) / (2.0 * h);
    let analytic = grad.per_face[0].dot(&dir);
    assert!(analytic.abs() > 1e-3, "degenerate direction {analytic}");
    assert!(((fd - analytic) / analytic).abs() < 1e-3, "fd {fd} analytic {analytic}");
}

#[test]
fn sds_gradient_zero_residual_and_linearity() {
    let mesh = Primitive::Sphere.mesh();
    let op = GradientOperator::new(&mesh).unwrap();
    let settings = RenderSettings::default();
    let camera = CameraRig::default().camera_at(mesh.centroid(), 0.4, 0.3).unwrap();
    let view = ViewRender::new(&mesh, mesh.vertices(), &camera, &settings).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps = random_image(&mut rng, settings.output);
    let same = SdsDraw {
        eps_hat: eps.clone(),
        eps: eps.clone(),
        weight: 1.0,
        alpha_bar: 0.5,
    };
    let g = sds_gradient(std::slice::from_ref(&same), std::slice::from_ref(&view), &op).unwrap();
    assert_eq!(g, JacobianField::zeros(mesh.face_count()));

    let draw = SdsDraw {
        eps_hat: random_image(&mut rng, settings.output),
        ..same
    };
    let one = sds_gradient(std::slice::from_ref(&draw), std::slice::from_ref(&view), &op).unwrap();
    let two = sds_gradient(&[draw.clone(), draw], &[view.clone(), view], &op).unwrap();
    let mut doubled = one.clone();
    doubled.scale(2.0);
    assert_eq!(two, doubled);
    assert!(one.norm() > 0.0);
}

#[test]
fn spec_validation_names_fields() {
    let bad = BlendSpec::desk(vec![boxed(0.7), BlendTarget::new(PromptToken::class("cone"), 0.4)]);
    match bad.validate() {
        Err(Error::Config { field, .. }) => assert_eq!(field, "targets.weight"),
        other => panic!("unexpected {other:?}"),
    }
    let negative = BlendSpec::desk(vec![boxed(-0.2)]);
    assert!(matches!(negative.validate(), Err(Error::Config { field, .. }) if field == "targets[0].weight"));
    let no_views = BlendSpec {
        views: 0,
        ..BlendSpec::desk(vec![boxed(1.0)])
    };
    assert!(matches!(no_views.validate(), Err(Error::Config { field, .. }) if field == "views"));
    assert!(BlendSpec::desk(vec![boxed(0.5), BlendTarget::new(PromptToken::class("cone"), 0.5)])
        .validate()
        .is_ok());
    let full = BlendSpec::full(vec![]);
    assert_eq!((full.iterations, full.views, full.guidance_scale), (2400, 16, 100.0));
}

#[test]
fn self_blend_at_zero_weight_is_exactly_the_source() {
    let bank = small_bank();
    let sched = NoiseSchedule::default();
    let mesh = Primitive::Sphere.mesh();
    let spec = short_spec(vec![], 6);
    let out = self_blend(&mesh, &PromptToken::class("box"), 0.0, &spec, &bank, &sched).unwrap();
    assert_eq!(out.vertices, mesh.vertices());
    assert_eq!(out.field, JacobianField::identity(mesh.face_count()));
    assert!(out.history.iter().all(|r| r.grad_norm == 0.0));
    assert!(self_blend(&mesh, &PromptToken::class("box"), 1.5, &spec, &bank, &sched).is_err());
}

#[test]
fn self_blend_at_full_weight_is_the_single_target_run() {
    let bank = small_bank();
    let sched = NoiseSchedule::default();
    let mesh = Primitive::Sphere.mesh();
    let spec = short_spec(vec![], 4);
    let a = self_blend(&mesh, &PromptToken::class("cone"), 1.0, &spec, &bank, &sched).unwrap();
    let direct = BlendSpec {
        targets: vec![BlendTarget::new(PromptToken::class("cone"), 1.0)],
        modified_cfg: true,
        ..spec
    };
    let b = optimize_deformation(&mesh, &direct, &bank, &sched).unwrap();
    assert_eq!(a.vertices, b.vertices);
    assert_ne!(a.vertices, mesh.vertices());
}

#[test]
fn runs_are_deterministic() {
    let bank = small_bank();
    let sched = NoiseSchedule::default();
    let mesh = Primitive::Sphere.mesh();
    let spec = short_spec(vec![boxed(0.6), BlendTarget::new(PromptToken::class("cone"), 0.4)], 4);
    let a = optimize_deformation(&mesh, &spec, &bank, &sched).unwrap();
    let b = optimize_deformation(&mesh, &spec, &bank, &sched).unwrap();
    assert_eq!(a.vertices, b.vertices);
    assert_eq!(a.history, b.history);
    let other = optimize_deformation(&mesh, &BlendSpec { seed: 9, ..spec }, &bank, &sched).unwrap();
    assert_ne!(a.vertices, other.vertices);
}

#[test]
fn total_gradient_is_sds_plus_regularizer() {
    let bank = small_bank();
    let sched = NoiseSchedule::default();
    let mesh = Primitive::Sphere.mesh();
    let spec = short_spec(vec![boxed(1.0)], 3);
    let mut session = Session::new(&mesh, &spec, &bank, &sched, true).unwrap();
    for _ in 0..3 {
        let g = session.compute_step().unwrap();
        let (reg_loss, reg) = jacobian_regularizer_gradient(session.field(), spec.reg_weight);
        assert_eq!(g.reg, reg);
        assert_eq!(g.reg_loss, reg_loss);
        for ((t, s), r) in g.total.per_face.iter().zip(&g.sds.per_face).zip(&g.reg.per_face) {
            assert_eq!(*t, s + r);
        }
        let record = session.apply(&g).unwrap();
        assert_eq!(record.grad_norm, g.total.norm());
    }
    assert_eq!(session.iteration(), 3);
    assert_eq!(session.history().len(), 3);
}

#[test]
fn zero_weight_target_leaves_predictions_unchanged() {
    let bank = small_bank();
    let sched = NoiseSchedule::default();
    let mesh = Primitive::Sphere.mesh();
    let two = short_spec(vec![BlendTarget::new(PromptToken::class("cone"), 0.0), boxed(0.8)], 3);
    let one = short_spec(vec![boxed(0.8)], 3);
    let mut a = Session::new(&mesh, &two, &bank, &sched, true).unwrap();
    let mut b = Session::new(&mesh, &one, &bank, &sched, true).unwrap();
    for _ in 0..3 {
        let ga = a.compute_step().unwrap();
        let gb = b.compute_step().unwrap();
        assert_eq!(ga.eps_hat, gb.eps_hat);
        a.apply(&ga).unwrap();
        b.apply(&gb).unwrap();
    }
}

#[test]
fn stiff_regularizer_keeps_the_mesh_in_place() {
    let bank = small_bank();
    let sched = NoiseSchedule::default();
    let mesh = Primitive::Sphere.mesh();
    let spec = BlendSpec {
        reg_weight: 1e6,
        ..BlendSpec::desk(vec![boxed(1.0)])
    };
    let out = optimize_deformation(&mesh, &spec, &bank, &sched).unwrap();
    let max = blendeform::mesh::max_displacement(&out.vertices, mesh.vertices());
    assert!(max < 1e-3 * mesh.bbox_diagonal(), "moved {max}");
}

#[test]
fn runaway_guidance_is_reported_with_its_iteration() {
    let bank = small_bank();
    let sched = NoiseSchedule::default();
    let mesh = Primitive::Sphere.mesh();
    let spec = BlendSpec {
        guidance_scale: 1e12,
        ..short_spec(vec![boxed(1.0)], 5)
    };
    match optimize_deformation(&mesh, &spec, &bank, &sched) {
        Err(Error::Diverged { iteration, norm }) => {
            assert_eq!(iteration, 0);
            assert!(norm > DIVERGENCE_LIMIT);
        }
        other => panic!("unexpected {:?}", other.map(|r| r.history)),
    }
}

#[test]
fn mismatched_bank_resolution_is_rejected() {
    let bank = small_bank();
    let sched = NoiseSchedule::default();
    let mesh = Primitive::Sphere.mesh();
    let mut spec = short_spec(vec![boxed(1.0)], 1);
    spec.render.output = 16;
    spec.render.raster = 32;
    assert!(matches!(
        Session::new(&mesh, &spec, &bank, &sched, true),
        Err(Error::InvalidArgument(_))
    ));
}
