use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subjectflow::conditioning::*;
use subjectflow::encoders::{EncoderConfig, EncoderStack, ReferenceImage, TokenKind, Vocab};
use subjectflow::numerics::Tensor;
use subjectflow::synthdata::{render_reference, Augmentation, ColorId, ShapeKind, SubjectSpec};

fn image(color: usize) -> ReferenceImage {
    let spec = SubjectSpec {
        shape: ShapeKind::Circle,
        color: ColorId(color),
        size: 5.0,
        motion: (0.0, 0.0),
        start: (16.0, 16.0),
    };
    ReferenceImage::new(render_reference(&spec, Augmentation::IDENTITY, 32, 32).unwrap(), None).unwrap()
}

fn stack() -> EncoderStack {
    EncoderStack::new(EncoderConfig::default(), Vocab::toy()).unwrap()
}

#[test]
fn sequence_layouts() {
    let vocab = Vocab::toy();
    let ph = vocab.placeholder();
    let prompt = vocab.tokenize("red circle moves right").unwrap();

    let (seq, imgs) = build_sequence(ph, &prompt, vec![], DEFAULT_K_MAX).unwrap();
    assert_eq!(seq.ids(), prompt.as_slice());
    assert!(imgs.is_empty());

    let (i1, i2) = (image(0), image(1));
    let (seq, imgs) = build_sequence(ph, &prompt, vec![i1.clone(), i2.clone()], DEFAULT_K_MAX).unwrap();
    assert_eq!(&seq.ids()[..4], prompt.as_slice());
    assert_eq!(&seq.ids()[4..], &[ph, ph]);
    assert_eq!(&seq.kinds()[4..], &[TokenKind::ImagePlaceholder; 2]);
    assert_eq!(imgs, vec![i1.clone(), i2]);

    let (seq, _) = build_sequence(ph, &[], vec![i1.clone()], DEFAULT_K_MAX).unwrap();
    assert_eq!(seq.ids(), &[ph]);

    assert!(build_sequence(ph, &prompt, vec![i1; 5], DEFAULT_K_MAX).is_err());
}

#[test]
fn joint_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Tensor::randn(&[5, 8], &mut rng);
    let t = Tensor::randn(&[7, 8], &mut rng);
    let j = make_joint(&m, &t).unwrap();
    assert_eq!(j.shape(), &[12, 8]);
    assert_eq!(&j.data()[..5 * 8], m.data());
    assert_eq!(&j.data()[5 * 8..], t.data());
    assert!(make_joint(&m, &Tensor::zeros(&[0, 8])).is_err());
    assert!(make_joint(&m, &Tensor::zeros(&[3, 6])).is_err());
}

#[test]
fn padded_latent_places_references_after_frames() {
    let enc = stack();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cz = enc.vae().latent_channels();
    let x_t = Tensor::randn(&[4, cz, 8, 8], &mut rng);
    let (i1, i2) = (image(2), image(3));
    let c_vae = vec![enc.vae().encode_image(&i1.pixels).unwrap(), enc.vae().encode_image(&i2.pixels).unwrap()];
    let padded = pad_and_place(&x_t, &c_vae, &Tensor::ones(&[2, 1, 8, 8])).unwrap();

    assert_eq!(padded.slots(), 6);
    assert_eq!(padded.x.shape(), &[6, 2 * cz + 1, 8, 8]);
    assert_eq!(padded.noisy_part(), x_t);
    assert_eq!(padded.channel_block(cz, 2 * cz, 5..6).data(), c_vae[1].data());
    assert!(padded.channel_block(cz, 2 * cz, 0..4).data().iter().all(|&v| v == 0.0));
    assert!(padded.channel_block(0, cz, 4..6).data().iter().all(|&v| v == 0.0));
    let mask = padded.channel_block(2 * cz, 2 * cz + 1, 0..6);
    assert_eq!(mask.sum(), 2.0 * 64.0);
    assert!(padded.channel_block(2 * cz, 2 * cz + 1, 0..4).data().iter().all(|&v| v == 0.0));
}

#[test]
fn padded_latent_without_references() {
    let x_t = Tensor::ones(&[3, 2, 4, 4]);
    let padded = pad_and_place(&x_t, &[], &Tensor::zeros(&[0, 1, 4, 4])).unwrap();
    assert_eq!(padded.slots(), 3);
    assert_eq!(padded.noisy_part(), x_t);
    assert!(padded.channel_block(2, 5, 0..3).data().iter().all(|&v| v == 0.0));
}

#[test]
fn padded_latent_rejects_bad_inputs() {
    let x_t = Tensor::ones(&[2, 2, 4, 4]);
    assert!(pad_and_place(&x_t, &[Tensor::ones(&[2, 4, 2])], &Tensor::ones(&[1, 1, 4, 4])).is_err());
    assert!(pad_and_place(&x_t, &[Tensor::ones(&[2, 4, 4])], &Tensor::full(&[1, 1, 4, 4], 0.5)).is_err());
    assert!(pad_and_place(&x_t, &[Tensor::ones(&[2, 4, 4])], &Tensor::ones(&[2, 1, 4, 4])).is_err());
}

#[test]
fn bundle_streams_follow_the_mode() {
    let enc = stack();
    let prompt = enc.vocab().tokenize("red circle moves right").unwrap();
    let full = ConditioningBundle::encode(&enc, &prompt, &[image(0)], JointMode::MllmAndText, DEFAULT_K_MAX).unwrap();
    let text = ConditioningBundle::encode(&enc, &prompt, &[image(0)], JointMode::TextOnly, DEFAULT_K_MAX).unwrap();
    let p = enc.config().mllm_tokens_per_image();
    assert_eq!(full.joint_len(), (4 + p) + 4);
    assert_eq!(text.joint_len(), 4);
    assert_eq!(full.c_clip, text.c_clip);
    assert_eq!(full.c_vae, text.c_vae);
}

#[test]
fn null_bundle_keeps_slot_count() {
    let enc = stack();
    let prompt = enc.vocab().tokenize("red circle moves right").unwrap();
    let b = ConditioningBundle::encode(&enc, &prompt, &[image(0), image(1)], JointMode::MllmAndText, 4).unwrap();
    let null = b.to_null();
    assert!(null.dropped);
    assert_eq!(null.k(), 2);
    assert_eq!(null.joint_len(), 1);
    assert!(null.c_vae.iter().all(|r| r.data().iter().all(|&v| v == 0.0)));
    assert_eq!(null.m_ref.sum(), 0.0);
}

#[test]
fn dropout_contract() {
    let enc = stack();
    let prompt = enc.vocab().tokenize("red circle moves right").unwrap();
    let b = ConditioningBundle::encode(&enc, &prompt, &[image(0)], JointMode::MllmAndText, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        assert_eq!(cfg_dropout(b.clone(), 0.0, &mut rng).unwrap(), b);
    }
    assert!(cfg_dropout(b.clone(), 1.0, &mut rng).is_err());
    assert!(cfg_dropout(b.clone(), -0.1, &mut rng).is_err());

    let pattern = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..200).map(|_| cfg_dropout(b.clone(), 0.3, &mut rng).unwrap().dropped).collect::<Vec<_>>()
    };
    let first = pattern(11);
    assert_eq!(first, pattern(11));
    let rate = first.iter().filter(|&&d| d).count() as f64 / 200.0;
    assert!((rate - 0.3).abs() < 0.1, "empirical drop rate {rate}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn padding_preserves_the_video(t in 1usize..5, k in 0usize..4, cz in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_t = Tensor::randn(&[t, cz, 4, 4], &mut rng);
        let refs: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[cz, 4, 4], &mut rng)).collect();
        let padded = pad_and_place(&x_t, &refs, &Tensor::ones(&[k, 1, 4, 4])).unwrap();
        prop_assert_eq!(padded.slots(), t + k);
        prop_assert_eq!(padded.noisy_part(), x_t);
        for (j, r) in refs.iter().enumerate() {
            let slot = padded.channel_block(cz, 2 * cz, t + j..t + j + 1);
            prop_assert_eq!(slot.data(), r.data());
        }
    }

    #[test]
    fn joint_is_injective(a in 1usize..5, b in 1usize..5, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::randn(&[a, 3], &mut rng);
        let t = Tensor::randn(&[b, 3], &mut rng);
        let mut t2 = t.clone();
        t2.data_mut()[0] += 1.0;
        prop_assert_ne!(make_joint(&m, &t).unwrap(), make_joint(&m, &t2).unwrap());
        let j = make_joint(&m, &t).unwrap();
        prop_assert_eq!(&j.data()[..a * 3], m.data());
    }
}
