use mmdag::benchgen::{evaluate, generate_benchmark, BenchmarkConfig};
use mmdag::learner::{fit, HyperParams, Problem, SimilarityMatrix};
use mmdag::sem::{assemble_embedding, ComponentRule, EmbeddingConfig};

fn main() -> Result<(), mmdag::Error> {
    let (truth, data) = generate_benchmark(&BenchmarkConfig { tasks: 4, samples: 50, ..Default::default() })?;
    let emb = EmbeddingConfig { components: ComponentRule::Fixed(3), center: false, vector_pca: None };
    let embedded = data
        .iter()
        .map(|t| assemble_embedding(t.task_id, &t.nodes, &emb))
        .collect::<Result<Vec<_>, _>>()?;
    let problem = Problem::from_embedded(&embedded, false)?;
    let result = fit(&problem, &SimilarityMatrix::uniform(4, 1.0)?, &HyperParams::default())?;
    let graphs: Vec<_> = result.tasks.iter().map(|t| t.adjacency.clone()).collect();
    println!("micro F1 {}", evaluate(&graphs, &truth)?.micro.f1);
    Ok(())
}
