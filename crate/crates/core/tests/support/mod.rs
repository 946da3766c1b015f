pub mod planner_oracle;
