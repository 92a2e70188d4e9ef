use msnt::data::TaskKind;
use msnt::models::Model;
use msnt::train::{evaluate, TrainConfig};

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let mut model: Model<f32> = Model::load(std::path::Path::new(&path)).unwrap();
    let mut cfg = TrainConfig::new(TaskKind::Distinguish, model.cfg.clone(), 1);
    cfg.dim = 8;
    cfg.eval_examples = 500;
    let res = evaluate(&mut model, &cfg).unwrap();
    println!("{} = {:.4} over {}", res.metric, res.value, res.n_examples);
}
