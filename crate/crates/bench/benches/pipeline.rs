use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use defilter_bench::{texture, tiny_corpus};
use defilter_core::autograd::Tape;
use defilter_core::filter_bank::{apply_filter, builtin_filter_bank};
use defilter_core::image::images_to_tensor;
use defilter_core::losses::info_nce;
use defilter_core::metrics::{delta_e_2000, ssim};
use defilter_core::model::{Model, ModelConfig};
use defilter_core::patch_sampling::{project_style, sample_locations};
use defilter_core::tensor::Tensor;
use defilter_core::trainer::{TrainConfig, Trainer};

fn filters(c: &mut Criterion) {
    let img = texture(256, 1);
    let bank = builtin_filter_bank(0);
    c.bench_function("apply 16 filters 256px", |b| {
        b.iter(|| bank.iter().map(|f| apply_filter(&img, f).unwrap()).collect::<Vec<_>>())
    });
}

fn metrics(c: &mut Criterion) {
    let a = texture(64, 1);
    let b = apply_filter(&a, &builtin_filter_bank(0)[3]).unwrap();
    c.bench_function("ssim 64px", |bench| bench.iter(|| ssim(&a, &b).unwrap()));
    c.bench_function("ciede2000 64px", |bench| bench.iter(|| delta_e_2000(&a, &b).unwrap()));
}

fn nce(c: &mut Criterion) {
    let k = 64;
    let row = |s: usize| Tensor::new(vec![1, k], (0..k).map(|i| ((i * s) % 17) as f32 / 17.0).collect());
    let negs = Tensor::new(vec![255, k], (0..255 * k).map(|i| ((i * 7) % 23) as f32 / 23.0).collect());
    c.bench_function("info_nce 256-way forward+backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let q = tape.leaf(row(3));
            let loss = info_nce(q, tape.constant(row(5)), tape.constant(negs.clone()), 0.07).unwrap();
            tape.backward(loss)
        })
    });
}

fn model(c: &mut Criterion) {
    let model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let imgs: Vec<_> = (0..4).map(|s| texture(64, s)).collect();
    let refs: Vec<_> = imgs.iter().collect();
    let x = images_to_tensor::<f32>(&refs).unwrap();
    c.bench_function("generator forward 4x64px", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = model.store.bind_frozen(&tape);
            model.generator.forward(&p, tape.constant(x.clone())).0.value()
        })
    });
    c.bench_function("style descriptors 4x64px 64 patches", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = model.store.bind_frozen(&tape);
            let pyr = model.generator.features(&p, tape.constant(x.clone()));
            let locs = sample_locations(&pyr, 64, 0);
            project_style(&p, &model.heads, &pyr, &locs, 3).unwrap().embeddings.len()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let dir = tempfile_dir();
    let manifest = tiny_corpus(&dir, 5, 64);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step default model 4x64px", |b| {
        b.iter_batched(
            || Trainer::<f32>::new(TrainConfig::default(), manifest.clone()).unwrap(),
            |mut t| t.train_step().unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
    let _ = std::fs::remove_dir_all(&dir);
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("defilter-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

criterion_group!(benches, filters, metrics, nce, model, train_step);
criterion_main!(benches);
