mod common;

use common::{rng, uniform};
use mlfcgan::models::{Discriminator, Generator, GeneratorVariant, ModelConfig};
use mlfcgan::Tape;

fn cfg(variant: GeneratorVariant, input_size: usize) -> ModelConfig {
    ModelConfig {
        input_size,
        variant,
        ..ModelConfig::default()
    }
}

#[test]
fn every_variant_maps_images_to_images_in_range() {
    let mut r = rng(3);
    for size in [16, 32] {
        let x = uniform(&mut r, &[2, 3, size, size], -1.0, 1.0);
        for v in GeneratorVariant::ALL {
            let g = Generator::new(&cfg(v, size)).unwrap();
            let p = g.init(11);
            let tape = Tape::new();
            let b = p.bind(&tape, false);
            let out = g.forward(&tape, &b, tape.constant(x.clone())).unwrap();
            let out = tape.value(out);
            assert_eq!(out.shape(), &[2, 3, size, size], "{}", v.label());
            assert!(out.data().iter().all(|o| o.is_finite() && (-1.0..=1.0).contains(o)));
        }
    }
}

#[test]
fn variants_differ_in_structure() {
    let counts: Vec<usize> = GeneratorVariant::ALL
        .iter()
        .map(|&v| Generator::new(&cfg(v, 64)).unwrap().init(0).count())
        .collect();
    for i in 0..counts.len() {
        for j in i + 1..counts.len() {
            assert_ne!(counts[i], counts[j], "{:?} vs {:?}", GeneratorVariant::ALL[i], GeneratorVariant::ALL[j]);
        }
    }
    for v in GeneratorVariant::ALL {
        assert_eq!(v.key().parse::<GeneratorVariant>().unwrap(), v);
    }
}

#[test]
fn generator_rejects_wrong_input() {
    let g = Generator::new(&cfg(GeneratorVariant::Ours, 32)).unwrap();
    let p = g.init(0);
    let tape = Tape::new();
    let b = p.bind(&tape, false);
    let x = tape.constant(mlfcgan::Tensor::zeros(&[1, 3, 16, 16]));
    assert!(g.forward(&tape, &b, x).is_err());
    assert!(Generator::new(&cfg(GeneratorVariant::Ours, 30)).is_err());
}

#[test]
fn critic_patch_ignores_pixels_outside_its_window() {
    let c = cfg(GeneratorVariant::Ours, 32);
    let d = Discriminator::new(&c).unwrap();
    assert_eq!(d.patch_grid(), 4);
    let (lo, hi) = d.receptive_window(0);
    assert!(hi < 31 && lo <= 0, "{lo}..{hi}");

    let p = d.init(5);
    let mut r = rng(8);
    let x = uniform(&mut r, &[1, 3, 32, 32], -1.0, 1.0);
    let y = uniform(&mut r, &[1, 3, 32, 32], -1.0, 1.0);
    let mut y2 = y.clone();
    let last = 31 * 32 + 31;
    for ch in 0..3 {
        y2.data_mut()[ch * 1024 + last] += 1.5;
    }
    let scores = |cand: &mlfcgan::Tensor| {
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let s = d
            .forward(&tape, &b, tape.constant(x.clone()), tape.constant(cand.clone()))
            .unwrap();
        tape.value(s).as_ref().clone()
    };
    let (a, b) = (scores(&y), scores(&y2));
    assert_eq!(a.shape(), &[1, 1, 4, 4]);
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    assert_ne!(a.data()[15], b.data()[15]);
}
