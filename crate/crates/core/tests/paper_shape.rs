mod common;

use tgif_core::router::RouterMode;

#[test]
fn paper_dimensions_run_forward_and_backward() {
    for mode in [RouterMode::TextOnly, RouterMode::Multimodal] {
        let (loss, grads) = common::paper_shape_step(mode).unwrap();
        assert!(loss > 0.0, "{mode}: loss {loss}");
        assert!(grads > 0);
    }
}
