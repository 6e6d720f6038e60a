use auxtune::datagen::GrammarSpec;
use auxtune::experiment::{train_scorer, GrammarConfig, GrammarData};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn scorer_prefers_grammatical_text_over_word_salad() {
    let mut cfg = GrammarConfig::quick();
    cfg.scorer_train.steps = 400;
    let data = GrammarData::generate(&cfg).unwrap();
    let (scorer, report) = train_scorer(&cfg, &data).unwrap();
    assert!(report.rows.last().unwrap().loss < report.rows[0].loss);

    let spec = GrammarSpec::default_task(cfg.grammar_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut fluent, mut salad) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let s = spec.sample_sentence(&mut rng);
        let mut words = s.words();
        fluent.push(data.vocab.encode(&words).unwrap());
        // same words, so the unigram term is unchanged; only order differs
        while spec.recognize(&words).is_some() {
            words.shuffle(&mut rng);
        }
        salad.push(data.vocab.encode(&words).unwrap());
    }
    let mean = |texts: &[Vec<usize>]| {
        let items: Vec<(Vec<usize>, Vec<usize>)> =
            texts.iter().map(|t| (vec![], t.clone())).collect();
        let v = scorer.slor_batch(&items).unwrap();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (f, s) = (mean(&fluent), mean(&salad));
    assert!(f - s > 0.5, "fluent {f:.3} salad {s:.3}");
}
