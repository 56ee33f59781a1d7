//! Random extracting strategy on a 1000-frame sequence: about 10% of the
//! frames survive, grouped in runs of at least two.

use quatmotion::io::res_indices;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for seed in 0..3 {
        let kept = res_indices(1000, seed)?;
        let mut runs = vec![1usize];
        for w in kept.windows(2) {
            if w[1] == w[0] + 5 {
                *runs.last_mut().unwrap() += 1;
            } else {
                runs.push(1);
            }
        }
        println!("seed {seed}: kept {} frames, runs {:?}", kept.len(), runs);
    }
    Ok(())
}
