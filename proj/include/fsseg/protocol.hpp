#pragma once

#include <vector>

#include "fsseg/error.hpp"

// Fold cross-validation protocol: the ordered class list is cut into
// num_folds equal contiguous chunks; fold_index names the held-out chunk.
namespace fsseg {

struct FoldProtocol {
  std::vector<int> class_list;
  int num_folds = 4;
  int fold_index = 0;

  void validate() const {
    if (class_list.empty()) throw BadConfig("fold protocol: empty class list");
    if (num_folds <= 0) throw BadConfig("fold protocol: num_folds must be positive");
    if (class_list.size() % size_t(num_folds) != 0)
      throw BadConfig("fold protocol: " + std::to_string(class_list.size()) +
                      " classes do not split into " + std::to_string(num_folds) + " folds");
    if (fold_index < 0 || fold_index >= num_folds)
      throw BadConfig("fold protocol: fold index out of range");
    for (size_t i = 0; i < class_list.size(); ++i)
      for (size_t j = i + 1; j < class_list.size(); ++j)
        if (class_list[i] == class_list[j])
          throw BadConfig("fold protocol: duplicate class id " +
                          std::to_string(class_list[i]));
  }

  // the held-out contiguous chunk
  std::vector<int> test_classes() const {
    validate();
    size_t per = class_list.size() / size_t(num_folds);
    auto begin = class_list.begin() + long(per * size_t(fold_index));
    return {begin, begin + long(per)};
  }

  std::vector<int> train_classes() const {
    validate();
    size_t per = class_list.size() / size_t(num_folds);
    std::vector<int> out;
    for (size_t i = 0; i < class_list.size(); ++i)
      if (i / per != size_t(fold_index)) out.push_back(class_list[i]);
    return out;
  }
};

}  // namespace fsseg
