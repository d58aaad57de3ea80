macro_rules! example_test {
    ($module:ident, $file:literal) => {
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }

        #[test]
        fn $module() {
            $module::run_example().expect(concat!($file, " should run"));
        }
    };
}

example_test!(noise_schedule, "noise_schedule.rs");
example_test!(fusion_metrics, "fusion_metrics.rs");
example_test!(semantic_masks, "semantic_masks.rs");
example_test!(stage1_training, "stage1_training.rs");
example_test!(two_stage_fusion, "two_stage_fusion.rs");
example_test!(ablation_study, "ablation_study.rs");
example_test!(cli_workflow, "cli_workflow.rs");
