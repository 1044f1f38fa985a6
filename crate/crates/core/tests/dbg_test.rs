use dsgwn_core::config::PipelineConfig;
use dsgwn_core::fitting::*;
use dsgwn_core::model::circular_difference;
use dsgwn_core::synth::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[test]
fn dbg_pilot48() {
    let pc = PipelineConfig::default();
    let t0 = std::time::Instant::now();
    let (model, report) = build_face_model(pc.model.template_size, 16, 0, &pc.model.build).unwrap();
    println!("build {:?} capture {:.4}", t0.elapsed(), 1.0 - report.final_energy / report.initial_energy);
    let template = TemplateField::from_network(&model.base, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let draws: Vec<_> = (0..12).map(|i| {
        (i, face_pose(
            rng.random_range(0.8..1.3),
            rng.random_range(-0.4..0.4),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-0.008..0.008),
            rng.random_range(-0.008..0.008),
        ).unwrap())
    }).collect();
    let t0 = std::time::Instant::now();
    let outcomes: Vec<String> = draws.par_iter().map(|(i, truth)| {
        let spec = SyntheticFaceSpec { pose: truth.clone(), noise_sigma: 0.05, width: 96, height: 96, seed: 1000 + *i as u64 };
        let (img, record) = synth_generate(&template, &spec).unwrap();
        let report = fit_face(&model, &img, &record.window, &pc.fit).unwrap();
        let f = report.model.global.canonical_params().unwrap();
        let t = &record.pose;
        let se = (f.scale / t.scale - 1.0).abs();
        let te = circular_difference(f.theta, t.theta);
        let ce = ((f.cx - t.cx).powi(2) + (f.cy - t.cy).powi(2)).sqrt();
        let h1 = (f.h31 - t.h31).abs();
        let h2 = (f.h32 - t.h32).abs();
        let ok = se <= 0.02 && te <= 0.02 && ce <= 0.5 && h1 <= 8e-4 && h2 <= 8e-4;
        format!("{i}: se {se:.4} te {te:.4} ce {ce:.3} h1 {h1:.5} h2 {h2:.5} {}", if ok {"PASS"} else {"FAIL"})
    }).collect();
    for o in &outcomes { println!("{o}"); }
    let fails = outcomes.iter().filter(|o| o.ends_with("FAIL")).count();
    println!("fails {fails}/12 elapsed {:?}", t0.elapsed());
}
