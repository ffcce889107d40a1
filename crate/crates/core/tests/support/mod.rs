pub mod grad_cases;
