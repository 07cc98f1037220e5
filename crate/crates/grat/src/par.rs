//! Order-preserving map over independent work items.
//!
//! Sweeps (seeds, ablation cells, Monte-Carlo batches) are embarrassingly
//! parallel: every item owns its RNG stream and shares nothing. With the
//! `parallel` feature (on by default) `run_each` fans out across a rayon
//! pool; built with `--no-default-features` it degrades to a plain
//! sequential loop with the same signature and the same output order.
//! `run_each_seq` is the always-sequential twin, kept callable in every
//! build so the two can be compared — results must be identical, since
//! items are independent and collection is order-preserving.

/// Maps `f` over `items`, in parallel when the `parallel` feature is
/// enabled. Output order matches input order.
pub fn run_each<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Sequential twin of `run_each` — identical contract, never parallel.
pub fn run_each_seq<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn outputs_keep_input_order() {
        let items: Vec<usize> = (0..64).collect();
        let out = run_each(items.clone(), |i| i * i);
        let expect: Vec<usize> = items.iter().map(|i| i * i).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn parallel_and_sequential_agree_on_seeded_work() {
        // each item derives everything from its own seed, so the two
        // execution strategies must produce identical floats
        let work = |seed: u64| {
            let mut rng = stream_rng(seed, 7);
            (0..100).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>()
        };
        let seeds: Vec<u64> = (0..32).collect();
        let a = run_each(seeds.clone(), work);
        let b = run_each_seq(seeds, work);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn collects_results_with_errors_intact() {
        let out: Vec<Result<usize, String>> = run_each(vec![1usize, 2, 3], |i| {
            if i == 2 {
                Err("two".into())
            } else {
                Ok(i)
            }
        });
        assert_eq!(out[0], Ok(1));
        assert_eq!(out[1], Err("two".into()));
        assert_eq!(out[2], Ok(3));
    }
}
