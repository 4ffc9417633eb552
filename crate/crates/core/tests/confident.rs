use cwcl::confident::*;
use cwcl::corpus::{AugPolicy, Augmenter, Image, ImageShape, LabeledImageSet, NoiseSpec, NoisyCorpus, Split};
use cwcl::nn::{BackboneSpec, TappedBackbone};
use cwcl::rng::{stream, Purpose};
use cwcl::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

const K: usize = 10;

fn shape() -> ImageShape {
    ImageShape::new(8, 8, 3)
}

/// Reads the class encoded as pixel value `y / 10`. Cropping pads with zeros,
/// so the maximum pixel survives any crop.
struct PixelOracle {
    margin: f32,
}

impl Predictor for PixelOracle {
    fn num_classes(&self) -> usize {
        K
    }

    fn logits(&self, images: &[Image]) -> Result<Vec<f32>> {
        let mut out = vec![0.0; images.len() * K];
        for (i, img) in images.iter().enumerate() {
            let y = img.data().iter().fold(0.0f32, |a, &b| a.max(b)) * 10.0;
            let y = y.round() as usize;
            out[i * K + y] = self.margin;
        }
        Ok(out)
    }
}

struct Uniform;

impl Predictor for Uniform {
    fn num_classes(&self) -> usize {
        K
    }

    fn logits(&self, images: &[Image]) -> Result<Vec<f32>> {
        Ok(vec![0.0; images.len() * K])
    }
}

/// Images encode their clean label.
fn corpus_encoding(n: usize, rate: f64, seed: u64) -> NoisyCorpus {
    let clean: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % K).collect();
    let base = LabeledImageSet::new(
        clean.iter().map(|&y| Image::filled(shape(), y as f32 / 10.0)).collect(),
        clean.clone(),
        K,
        Split::Train,
    )
    .unwrap();
    NoisyCorpus::inject(base, NoiseSpec::symmetric(rate), seed).unwrap()
}

fn relabel_images_with_noisy(corpus: &NoisyCorpus) -> NoisyCorpus {
    let base = LabeledImageSet::new(
        corpus.noisy_labels().iter().map(|&y| Image::filled(shape(), y as f32 / 10.0)).collect(),
        corpus.clean_labels().to_vec(),
        K,
        Split::Train,
    )
    .unwrap();
    NoisyCorpus::from_overlay(base, corpus.overlay(), corpus.noise_spec().clone(), corpus.seed()).unwrap()
}

fn augmenter() -> Augmenter {
    Augmenter::new(AugPolicy::default(), shape())
}

#[test]
fn true_label_oracle_selects_exactly_the_clean_indices() {
    let corpus = corpus_encoding(600, 0.4, 17);
    let cfg = SelectConfig { gamma: 0.9, seed: 5, ..SelectConfig::default() };
    let sel = select_confident(&PixelOracle { margin: 100.0 }, &corpus, &augmenter(), &cfg, 0).unwrap();
    let expected: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus.flip_mask()[i]).collect();
    assert_eq!(sel.indices, expected);
    assert_eq!(selection_noise_rate(&sel, corpus.flip_mask()).unwrap(), 0.0);
    sel.validate(corpus.len()).unwrap();
}

#[test]
fn noisy_label_oracle_selects_everything() {
    let corpus = relabel_images_with_noisy(&corpus_encoding(300, 0.4, 3));
    let cfg = SelectConfig::default();
    let sel = select_confident(&PixelOracle { margin: 100.0 }, &corpus, &augmenter(), &cfg, 1).unwrap();
    assert_eq!(sel.indices, (0..300).collect::<Vec<_>>());
    assert_eq!(sel.round, 1);
}

#[test]
fn uniform_model_selects_nothing() {
    let corpus = corpus_encoding(100, 0.2, 3);
    let cfg = SelectConfig { gamma: 0.11, ..SelectConfig::default() };
    let sel = select_confident(&Uniform, &corpus, &augmenter(), &cfg, 0).unwrap();
    assert!(sel.is_empty());
}

#[test]
fn identity_views_equal_single_view_softmax() {
    let spec = BackboneSpec::small();
    let model = TappedBackbone::new(spec, shape(), K, 9).unwrap();
    let img = Image::new(shape(), (0..shape().len()).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
    let aug = Augmenter::new(AugPolicy::identity(), shape());
    let avg = predict_averaged(&model, &img, &aug, &mut stream(0, Purpose::Select, 0, 0)).unwrap();
    let single = softmax(&model.logits(&[img]).unwrap()).unwrap();
    for (a, s) in avg.iter().zip(&single) {
        assert!((a - s).abs() < 1e-12);
    }
    assert!((avg.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

/// Class 0 when the top-left pixel is bright, class 1 otherwise.
struct LeftBright;

impl Predictor for LeftBright {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&self, images: &[Image]) -> Result<Vec<f32>> {
        Ok(images
            .iter()
            .flat_map(|im| if im.at(0, 0, 0) > 0.5 { [200.0, 0.0] } else { [0.0, 200.0] })
            .collect())
    }
}

#[test]
fn disagreeing_views_average_to_half() {
    let s = ImageShape::new(2, 2, 1);
    let img = Image::new(s, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let aug = Augmenter::new(AugPolicy::flip_only(0.5), s);
    let mut seen = false;
    for seed in 0..64 {
        let mut rng = stream(seed, Purpose::Select, 0, 0);
        let pair = aug.view_pair(&img, 0, &mut stream(seed, Purpose::Select, 0, 0)).unwrap();
        let p = predict_averaged(&LeftBright, &img, &aug, &mut rng).unwrap();
        if pair.view_a != pair.view_b {
            assert_eq!(p, vec![0.5, 0.5]);
            seen = true;
        }
    }
    assert!(seen);
}

#[test]
fn scores_match_recomputed_predictions_and_nest_in_gamma() {
    let corpus = corpus_encoding(64, 0.3, 8);
    let model = TappedBackbone::new(BackboneSpec::small(), shape(), K, 4).unwrap();
    let aug = augmenter();
    let low = SelectConfig { gamma: 0.05, seed: 21, chunk: 13, ..SelectConfig::default() };
    let high = SelectConfig { gamma: 0.12, ..low };
    let a = select_confident(&model, &corpus, &aug, &low, 2).unwrap();
    let b = select_confident(&model, &corpus, &aug, &high, 2).unwrap();
    assert!(b.indices.iter().all(|i| a.contains(*i)));
    assert!(!a.is_empty());
    for (&i, &score) in a.indices.iter().zip(&a.scores) {
        let mut rng = stream(21, Purpose::Select, 2, i as u64);
        let p = predict_averaged(&model, &corpus.images()[i], &aug, &mut rng).unwrap();
        assert!((p[corpus.noisy_labels()[i]] - score).abs() < 1e-6);
    }
}

#[test]
fn two_class_marginals_are_balanced() {
    let labels: Vec<usize> = (0..110).map(|i| usize::from(i >= 100)).collect();
    let sel = ConfidentSet { indices: (0..110).collect(), scores: vec![1.0; 110], round: 0, threshold: 0.9 };
    let mut rng = stream(77, Purpose::Sampler, 0, 0);
    let batches = class_balanced_batches(&sel, &labels, 100, 10, &mut rng).unwrap();
    let b_count = batches.iter().flatten().filter(|&&i| labels[i] == 1).count();
    assert!((b_count as f64 - 500.0).abs() <= 47.5, "{b_count}");
}

proptest! {
    #[test]
    fn gamma_nesting(scores in prop::collection::vec(0.0f64..=1.0, 1..200), g1 in 0.01f64..=1.0, g2 in 0.01f64..=1.0) {
        let labels: Vec<usize> = (0..scores.len()).map(|i| i % 3).collect();
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let a = select_from_scores(&scores, &labels, &SelectConfig { gamma: lo, ..SelectConfig::default() }, 0).unwrap();
        let b = select_from_scores(&scores, &labels, &SelectConfig { gamma: hi, ..SelectConfig::default() }, 0).unwrap();
        prop_assert!(b.indices.iter().all(|i| a.contains(*i)));
        a.validate(scores.len()).unwrap();
    }

    #[test]
    fn averaged_probabilities_sum_to_one(seed in any::<u64>(), logits in prop::collection::vec(-30.0f32..30.0, 4)) {
        let a = softmax(&logits).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shifted: Vec<f32> = logits.iter().map(|v| v + rng.gen_range(-5.0f32..5.0)).collect();
        let b = softmax(&shifted).unwrap();
        let avg: f64 = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).sum();
        prop_assert!((avg - 1.0).abs() < 1e-6);
    }
}

#[test]
fn marginals_within_four_sigma() {
    let configs: [&[usize]; 4] = [&[5, 3], &[100, 10], &[1, 7, 30], &[12, 12, 2, 40, 9]];
    for (k, sizes) in configs.iter().enumerate() {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
        let n = labels.len();
        let sel = ConfidentSet { indices: (0..n).collect(), scores: vec![1.0; n], round: 0, threshold: 0.9 };
        let sampler = ClassBalancedSampler::new(&sel, &labels).unwrap();
        let mut rng = stream(2024, Purpose::Sampler, k as u64, 0);
        let t = 5000usize;
        let mut counts = vec![0usize; sizes.len()];
        for _ in 0..t {
            counts[labels[sampler.draw(&mut rng)]] += 1;
        }
        let p = 1.0 / sizes.len() as f64;
        let sigma = (t as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - t as f64 * p).abs() <= 4.0 * sigma, "{sizes:?}: {c}");
        }
    }
}
