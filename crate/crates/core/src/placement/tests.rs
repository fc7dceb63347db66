use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::Rng;

use super::vocab::{BOS, EOS, SEP};
use super::*;
use crate::datagen::{generate_samples, DatasetConfig};
use crate::rng::seeded;
use crate::touchprior::MarkerSpec;

fn stats() -> SizeStats {
    SizeStats { mean_w: 0.2, std_w: 0.05, mean_h: 0.25, std_h: 0.05 }
}

fn micro_config() -> PlacementConfig {
    PlacementConfig {
        image_size: 16,
        patch_size: 8,
        dim: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        context: 64,
        max_new_tokens: 12,
        marker: MarkerSpec { size_px: 4, ..MarkerSpec::default() },
        reasoning: true,
        touch_tokens: true,
    }
}

fn micro_model(dtype: DType, seed: u64) -> PlacementModel {
    let vocab = Vocabulary::from_corpus_with_bins(
        [PROMPT_PREFIX, PROMPT_SUFFIX, "add a red circle", "place it near the top left"],
        10,
    );
    PlacementModel::new(micro_config(), vocab, stats(), dtype, &mut seeded(seed)).unwrap()
}

fn micro_inputs(model: &PlacementModel, touch: (f64, f64)) -> (Image, TokenSequence, TokenSequence) {
    let mut img = Image::filled(16, 16, [90, 140, 200]).unwrap();
    img.set_pixel(3, 5, [0.1, 0.9, 0.2]);
    let touch = TouchPoint::normalized(touch.0, touch.1).unwrap();
    let (composite, prompt) = model.prepare(&img, "add a red circle", &touch).unwrap();
    let bbox = NormalizedBBox::new(0.3, 0.6, 0.2, 0.4).unwrap();
    let response = encode_response("place it near the top left", &bbox, &model.vocab).unwrap();
    (composite, prompt, response)
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn nll_matches_hand_computation_on_three_tokens() {
    let logits = [[0.3f64, -1.2, 2.0, 0.5], [1.5, 0.1, -0.4, 0.0], [-2.0, 0.7, 0.7, 3.1]];
    let targets = [2u32, 0, 3];
    let mut expected = 0.0;
    for (row, &t) in logits.iter().zip(&targets) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        expected += lse - row[t as usize];
    }
    expected /= 3.0;
    let dev = Device::Cpu;
    let l = Tensor::new(&logits, &dev).unwrap().unsqueeze(0).unwrap();
    let t = Tensor::new(&targets, &dev).unwrap().unsqueeze(0).unwrap();
    let w = Tensor::ones((1, 3), DType::F64, &dev).unwrap();
    let got = scalar(&sequence_nll(&l, &t, &w).unwrap());
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    let lf = l.to_dtype(DType::F32).unwrap();
    let wf = w.to_dtype(DType::F32).unwrap();
    assert!((scalar(&sequence_nll(&lf, &t, &wf).unwrap()) - expected).abs() < 1e-6);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let dev = Device::Cpu;
    let l = Tensor::zeros((2, 5, 128), DType::F32, &dev).unwrap();
    let t = Tensor::new(&[[1u32, 7, 3, 127, 0], [5, 5, 5, 5, 5]], &dev).unwrap();
    let w = Tensor::ones((2, 5), DType::F32, &dev).unwrap();
    let got = scalar(&sequence_nll(&l, &t, &w).unwrap());
    assert!((got - 128f64.ln()).abs() < 1e-4);
    assert!((128f64.ln() - 4.852).abs() < 1e-3);

    // The whole model with a zeroed output layer predicts uniformly too.
    let model = micro_model(DType::F32, 1);
    for name in ["head.weight", "head.bias"] {
        let var = model.params().get(name).unwrap();
        var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
    }
    let (img, prompt, response) = micro_inputs(&model, (0.5, 0.5));
    let loss = scalar(&model.lm_loss(&img, &prompt, &response).unwrap());
    assert!((loss - (model.vocab.len() as f64).ln()).abs() < 1e-4);
}

#[test]
fn perfect_prediction_gives_zero_loss() {
    let dev = Device::Cpu;
    let mut logits = vec![-1e4f32; 3 * 6];
    for (i, t) in [4usize, 0, 2].iter().enumerate() {
        logits[i * 6 + t] = 1e4;
    }
    let l = Tensor::from_vec(logits, (1, 3, 6), &dev).unwrap();
    let t = Tensor::new(&[[4u32, 0, 2]], &dev).unwrap();
    let w = Tensor::ones((1, 3), DType::F32, &dev).unwrap();
    assert_eq!(scalar(&sequence_nll(&l, &t, &w).unwrap()), 0.0);
}

#[test]
fn masked_positions_do_not_contribute() {
    let model = micro_model(DType::F64, 2);
    let (img, prompt, response) = micro_inputs(&model, (0.4, 0.6));
    let (inputs, targets, weights) = model.build_batch(&[(&prompt, &response)]).unwrap();
    let images = model.image_batch(&[&img]).unwrap();
    let logits = model.forward(&images, &inputs, None).unwrap();
    let base = scalar(&sequence_nll(&logits, &targets, &weights).unwrap());
    assert!((base - scalar(&model.lm_loss(&img, &prompt, &response).unwrap())).abs() < 1e-12);
    let w: Vec<f64> = weights.flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(w.iter().sum::<f64>() as usize, response.len());
    let mut t: Vec<u32> = targets.flatten_all().unwrap().to_vec1().unwrap();
    let mut rng = seeded(9);
    for (i, wi) in w.iter().enumerate() {
        if *wi == 0.0 {
            t[i] = rng.random_range(0..model.vocab.len() as u32);
        }
    }
    let altered = Tensor::from_vec(t, targets.dims(), &Device::Cpu).unwrap();
    assert_eq!(scalar(&sequence_nll(&logits, &altered, &weights).unwrap()), base);
}

#[test]
fn gradients_match_finite_differences() {
    let model = micro_model(DType::F64, 3);
    let (img, prompt, response) = micro_inputs(&model, (0.7, 0.3));
    let loss = model.lm_loss(&img, &prompt, &response).unwrap();
    let grads = loss.backward().unwrap();
    let named: Vec<_> = model.params().named().map(|(n, v)| (n.clone(), v.clone())).collect();
    let mut rng = seeded(4);
    let eps = 1e-5;
    for _ in 0..20 {
        let (name, var) = &named[rng.random_range(0..named.len())];
        let n = var.elem_count();
        let idx = rng.random_range(0..n);
        let analytic: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let orig: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let eval = |delta: f64| {
            let mut v = orig.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            scalar(&model.lm_loss(&img, &prompt, &response).unwrap())
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        var.set(&Tensor::from_vec(orig, var.dims(), &Device::Cpu).unwrap()).unwrap();
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-3, "{name}[{idx}]: analytic {a} numeric {numeric}");
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let model = micro_model(DType::F64, 5);
    let (img, prompt, response) = micro_inputs(&model, (0.2, 0.8));
    let (inputs, _, _) = model.build_batch(&[(&prompt, &response)]).unwrap();
    let images = model.image_batch(&[&img]).unwrap();
    let full = candle_nn::ops::softmax(&model.forward(&images, &inputs, None).unwrap(), D::Minus1).unwrap();
    let p = model.config.num_patches();

    let mut cache = KvCache::default();
    let ids = Tensor::new(prompt.ids.as_slice(), &Device::Cpu).unwrap().unsqueeze(0).unwrap();
    let mut step = model.forward(&images, &ids, Some(&mut cache)).unwrap();
    for (k, &tok) in response.ids.iter().enumerate() {
        let pos = p + prompt.len() - 1 + k;
        let last = step.dim(1).unwrap() - 1;
        let a: Vec<f64> = candle_nn::ops::softmax(&step.i((0, last)).unwrap(), D::Minus1).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = full.i((0, pos)).unwrap().to_vec1().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        let t = Tensor::new(&[[tok]], &Device::Cpu).unwrap();
        step = model.forward_tokens(&t, &mut cache).unwrap();
    }
}

#[test]
fn vision_embedding_shape_and_sensitivity() {
    let cfg = PlacementConfig { dim: 32, layers: 1, heads: 2, ..PlacementConfig::default() };
    let vocab = build_vocabulary(["add a red circle"]);
    let model = PlacementModel::new(cfg, vocab, stats(), DType::F32, &mut seeded(0)).unwrap();
    let img = Image::filled(64, 64, [120, 120, 120]).unwrap();
    let spec = MarkerSpec::default();
    let a = render_marker(&img, &TouchPoint::normalized(0.2, 0.2).unwrap(), &spec).unwrap();
    let b = render_marker(&img, &TouchPoint::normalized(0.8, 0.7).unwrap(), &spec).unwrap();
    let fa = model.vision_embed(&a).unwrap();
    assert_eq!(fa.dims(), &[64, 32]);
    let fa2 = model.vision_embed(&a).unwrap();
    let diff = |x: &Tensor, y: &Tensor| scalar(&(x - y).unwrap().abs().unwrap().sum_all().unwrap());
    assert_eq!(diff(&fa, &fa2), 0.0);
    assert!(diff(&fa, &model.vision_embed(&b).unwrap()) > 1e-3);
    let small = Image::filled(32, 32, [0, 0, 0]).unwrap();
    assert!(matches!(model.vision_embed(&small), Err(Error::Resolution { .. })));
}

#[test]
fn hard_wired_tokens_and_fallback() {
    let vocab = build_vocabulary(std::iter::empty());
    let t = |a, b| vocab.coord_token(a, b).unwrap();
    let touch = TouchPoint::normalized(0.3, 0.7).unwrap();
    let ids = [t(Axis::X, 50), t(Axis::Y, 50), t(Axis::W, 40), t(Axis::H, 40), EOS];
    let r = result_from_tokens(&ids, &vocab, &touch, &stats());
    assert_eq!(r.bbox.to_array(), [0.505, 0.505, 0.405, 0.405]);
    assert!(!r.fallback_used);
    let r = result_from_tokens(&[SEP, BOS, EOS], &vocab, &touch, &stats());
    assert!(r.fallback_used);
    assert_eq!(r.bbox.to_array(), [0.3, 0.7, 0.2, 0.25]);
}

#[test]
fn ablated_targets_are_coordinates_only() {
    let mut model = micro_model(DType::F32, 0);
    model.config.reasoning = false;
    let bbox = NormalizedBBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
    assert_eq!(model.target_response("place it near the top left", &bbox).unwrap().len(), 6);
}

#[test]
fn context_overflow_is_an_error() {
    let model = micro_model(DType::F32, 0);
    let (img, prompt, _) = micro_inputs(&model, (0.5, 0.5));
    let long = TokenSequence { ids: vec![SEP; 80], roles: vec![Role::Control; 80] };
    assert!(matches!(model.lm_loss(&img, &prompt, &long), Err(Error::ContextOverflow { .. })));
}

fn tiny_samples() -> Vec<EditSample> {
    generate_samples(&DatasetConfig::default(), 24, 11, "t").unwrap()
}

fn tiny_train_config() -> PlacementConfig {
    PlacementConfig {
        dim: 32,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        context: 128,
        max_new_tokens: 24,
        ..PlacementConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let samples = tiny_samples();
    let refs: Vec<&EditSample> = samples.iter().collect();
    let vocab = build_vocabulary(refs.iter().flat_map(|s| [s.instruction.as_str(), s.reasoning.as_str()]));
    let model = PlacementModel::new(tiny_train_config(), vocab, stats(), DType::F32, &mut seeded(0)).unwrap();
    let before = model.params().snapshot().unwrap();
    let cfg = PlacementTrainConfig { epochs: 1, batch_size: 8, lr: 0.0, augment: false, ..Default::default() };
    fit(&model, &refs, &[], &cfg, 1).unwrap();
    assert_eq!(model.params().snapshot().unwrap(), before);
}

#[test]
fn training_reduces_loss_and_round_trips_through_checkpoint() {
    let samples = tiny_samples();
    let refs: Vec<&EditSample> = samples.iter().collect();
    let (train, val) = refs.split_at(20);
    let cfg = PlacementTrainConfig { epochs: 6, batch_size: 8, lr: 3e-3, warmup_steps: 2, ..Default::default() };
    let out = train_placement(train, val, &tiny_train_config(), &cfg, 7).unwrap();
    let train_losses: Vec<f64> = out.curve.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
    assert_eq!(train_losses.len(), 6);
    assert!(train_losses.last().unwrap() < &train_losses[0]);
    assert_eq!(out.curve.iter().filter(|r| r.split == "val").count(), 6);

    let again = train_placement(train, val, &tiny_train_config(), &cfg, 7).unwrap();
    assert_eq!(again.curve, out.curve);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    out.model.save(&path).unwrap();
    let loaded = PlacementModel::load(&path).unwrap();
    let s = &samples[22];
    let a = predict_placement(&out.model, &s.source_image, &s.instruction, &s.touch).unwrap();
    let b = predict_placement(&loaded, &s.source_image, &s.instruction, &s.touch).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, predict_placement(&out.model, &s.source_image, &s.instruction, &s.touch).unwrap());
    let csv_path = dir.path().join("loss.csv");
    write_loss_csv(&out.curve, &csv_path).unwrap();
    let text = std::fs::read_to_string(csv_path).unwrap();
    assert!(text.starts_with("epoch,split,loss\n1,train,"));
}

#[test]
fn learning_rate_schedule() {
    let cfg = PlacementTrainConfig { lr: 1.0, warmup_steps: 4, min_lr_ratio: 0.1, ..Default::default() };
    assert_eq!(cfg.lr_at(0, 100), 0.25);
    assert_eq!(cfg.lr_at(4, 100), 1.0);
    assert!((cfg.lr_at(100, 100) - 0.1).abs() < 1e-12);
}
